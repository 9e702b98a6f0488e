"""Reverse-mode automatic differentiation over dense numpy tensors.

A `Node` wraps a float64 array plus the closures needed to backpropagate
into its parents (vector-Jacobian products).  `Parameter` marks trainable
leaves; after `backward()` each touched parameter holds its gradient and
untouched parameters read back as exact zeros.

Everything here is eager: calling an op computes the forward value
immediately and records vjps only while gradients are enabled (see
`no_grad`).  With gradients disabled the same code path produces the
identical floating-point results, just without the tape, so inference
and training can share one model implementation.

Shapes follow numpy broadcasting for elementwise ops; gradients are
summed back down to the parent shape (`_unbroadcast`).  Only the
broadcasting patterns the model code needs are exercised or tested.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .tensor import NonFiniteError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values unchanged)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """A tensor value in a reverse-mode computation graph."""

    __slots__ = ("value", "op", "_parents", "_vjps", "grad")

    def __init__(self, value, op: str = "leaf", parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self._parents = parents
        self._vjps = vjps
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def backward(self, seed=None) -> None:
        """Accumulate gradients of this node w.r.t. every ancestor.

        `seed` defaults to 1.0 and requires a scalar node; pass an array of
        matching shape to backpropagate an arbitrary cotangent.
        """
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar node")
            seed = np.ones_like(self.value)
        if not np.all(np.isfinite(self.value)):
            raise NonFiniteError(f"backward from non-finite node (op={self.op})")

        order = _topo_order(self)
        self.grad = np.asarray(seed, dtype=np.float64)
        for node in order:
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib

    # Operator sugar; each forwards to a module-level op.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


class Parameter(Node):
    """A named trainable leaf."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value, op=f"param:{name}")
        self.name = name

    @property
    def grad_value(self) -> np.ndarray:
        """Gradient as an array; exact zeros when untouched by backward."""
        if self.grad is None:
            return np.zeros_like(self.value)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None


def _topo_order(root: Node) -> list[Node]:
    """Reverse topological order, iterative (graphs exceed recursion depth)."""
    order: list[Node] = []
    visited: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(x, op="const")


def constant(x) -> Node:
    return Node(x, op="const")


def _make(value, op, parents, vjps) -> Node:
    if _grad_enabled:
        return Node(value, op, tuple(parents), tuple(vjps))
    return Node(value, op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --- elementwise ---

def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value + b.value,
        "add",
        (a, b),
        (
            lambda g, sa=a.value.shape: _unbroadcast(g, sa),
            lambda g, sb=b.value.shape: _unbroadcast(g, sb),
        ),
    )


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value - b.value,
        "sub",
        (a, b),
        (
            lambda g, sa=a.value.shape: _unbroadcast(g, sa),
            lambda g, sb=b.value.shape: _unbroadcast(-g, sb),
        ),
    )


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    return _make(
        a.value * b.value,
        "mul",
        (a, b),
        (
            lambda g, bv=b.value, sa=a.value.shape: _unbroadcast(g * bv, sa),
            lambda g, av=a.value, sb=b.value.shape: _unbroadcast(g * av, sb),
        ),
    )


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = a.value / b.value
    return _make(
        out,
        "div",
        (a, b),
        (
            lambda g, bv=b.value, sa=a.value.shape: _unbroadcast(g / bv, sa),
            lambda g, av=a.value, bv=b.value, sb=b.value.shape: _unbroadcast(
                -g * av / (bv * bv), sb
            ),
        ),
    )


def power(a, exponent: float) -> Node:
    a = as_node(a)
    out = a.value**exponent
    return _make(
        out,
        "power",
        (a,),
        (lambda g, av=a.value, e=exponent: g * e * av ** (e - 1.0),),
    )


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, "exp", (a,), (lambda g, o=out: g * o,))


def log(a) -> Node:
    a = as_node(a)
    return _make(np.log(a.value), "log", (a,), (lambda g, av=a.value: g / av,))


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return _make(a.value * mask, "relu", (a,), (lambda g, m=mask: g * m,))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, "tanh", (a,), (lambda g, o=out: g * (1.0 - o * o),))


def sigmoid(a) -> Node:
    a = as_node(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return _make(out, "sigmoid", (a,), (lambda g, o=out: g * o * (1.0 - o),))


# --- reductions ---

def sum_(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g, shape=a.value.shape, axis=axis, keepdims=keepdims):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _make(out, "sum", (a,), (vjp,))


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    if axis is None:
        n = a.value.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.value.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# --- shape ---

def reshape(a, shape) -> Node:
    a = as_node(a)
    return _make(
        a.value.reshape(shape),
        "reshape",
        (a,),
        (lambda g, s=a.value.shape: g.reshape(s),),
    )


def transpose(a, axes) -> Node:
    a = as_node(a)
    inv = np.argsort(axes)
    return _make(
        a.value.transpose(axes),
        "transpose",
        (a,),
        (lambda g, inv=tuple(inv): g.transpose(inv),),
    )


def concat(nodes, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([n.value for n in nodes], axis=axis)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            return g[tuple(sl)]

        return vjp

    return _make(out, "concat", tuple(nodes), tuple(make_vjp(i) for i in range(len(nodes))))


def stack(nodes, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    out = np.stack([n.value for n in nodes], axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return _make(out, "stack", tuple(nodes), tuple(make_vjp(i) for i in range(len(nodes))))


def getitem(a, index) -> Node:
    """Basic slicing/int-array indexing; gradient scattered back with add.at."""
    a = as_node(a)
    out = a.value[index]

    def vjp(g, shape=a.value.shape, index=index):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return full

    return _make(out, "getitem", (a,), (vjp,))


def gather_rows(table, ids) -> Node:
    """Embedding lookup: table is (V, D), ids any int shape; out ids.shape + (D,)."""
    table = as_node(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.value[ids]

    def vjp(g, shape=table.value.shape, ids=ids):
        full = np.zeros(shape)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return full

    return _make(out, "gather_rows", (table,), (vjp,))


# --- linear algebra ---

def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Node:
    """np.matmul semantics for operands of rank >= 2 (batch dims broadcast)."""
    a, b = as_node(a), as_node(b)
    out = np.matmul(a.value, b.value)
    return _make(
        out,
        "matmul",
        (a, b),
        (
            lambda g, bv=b.value, sa=a.value.shape: _unbroadcast(
                np.matmul(g, _swap_last(bv)), sa
            ),
            lambda g, av=a.value, sb=b.value.shape: _unbroadcast(
                np.matmul(_swap_last(av), g), sb
            ),
        ),
    )


# --- softmax family ---

def softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, s=out, axis=axis):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _make(out, "softmax", (a,), (vjp,))


def log_softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g, s=np.exp(out), axis=axis):
        return g - s * g.sum(axis=axis, keepdims=True)

    return _make(out, "log_softmax", (a,), (vjp,))


# --- convolution ---

def _conv_indices(h: int, w: int, kh: int, kw: int):
    oy, ox = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ky, kx = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    iy = oy.reshape(-1, 1) + ky.reshape(1, -1)  # (H*W, kh*kw)
    ix = ox.reshape(-1, 1) + kx.reshape(1, -1)
    return iy, ix


def conv2d(x, w, b=None) -> Node:
    """Stride-1 'same' 2-D convolution with zero padding.

    x: (N, Cin, H, W); w: (Cout, Cin, kh, kw) with odd kh, kw; b: (Cout,)
    or None.  Implemented as im2col + matmul so forward and backward are
    single large GEMMs.
    """
    x, w = as_node(x), as_node(w)
    b = as_node(b) if b is not None else None
    n, cin, h, wdt = x.value.shape
    cout, cin_w, kh, kw = w.value.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d requires odd kernel sizes")
    ph, pw = kh // 2, kw // 2

    xp = np.pad(x.value, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    iy, ix = _conv_indices(h, wdt, kh, kw)
    patches = xp[:, :, iy, ix]  # (N, Cin, H*W, kh*kw)
    cols = patches.transpose(0, 2, 1, 3).reshape(n * h * wdt, cin * kh * kw)
    wmat = w.value.reshape(cout, -1)
    out_flat = cols @ wmat.T
    if b is not None:
        out_flat = out_flat + b.value
    out = out_flat.reshape(n, h, wdt, cout).transpose(0, 3, 1, 2)

    def vjp_x(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(n * h * wdt, cout)
        gpatch = (gcols @ wmat).reshape(n, h * wdt, cin, kh * kw).transpose(0, 2, 1, 3)
        gxp = np.zeros_like(xp)
        np.add.at(gxp, (slice(None), slice(None), iy, ix), gpatch)
        return gxp[:, :, ph : ph + h, pw : pw + wdt]

    def vjp_w(g):
        gcols = g.transpose(0, 2, 3, 1).reshape(n * h * wdt, cout)
        return (gcols.T @ cols).reshape(cout, cin, kh, kw)

    parents = [x, w]
    vjps = [vjp_x, vjp_w]
    if b is not None:
        parents.append(b)
        vjps.append(lambda g: g.sum(axis=(0, 2, 3)))
    return _make(out, "conv2d", parents, vjps)


# --- composite losses ---

def cross_entropy(logits, targets, mask=None) -> Node:
    """Mean negative log-likelihood over (optionally masked) positions.

    logits: (..., V); targets: int array matching logits[..., 0]; mask:
    optional {0,1} float array over the same positions (masked-out
    positions contribute nothing, mean taken over kept positions).
    """
    logits = as_node(logits)
    lp = log_softmax(logits, axis=-1)
    targets = np.asarray(targets, dtype=np.int64)
    onehot = np.zeros(lp.value.shape)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    picked = sum_(mul(lp, onehot), axis=-1)
    if mask is None:
        return mul(sum_(picked), -1.0 / picked.value.size)
    mask = np.asarray(mask, dtype=np.float64)
    kept = mask.sum()
    if kept == 0:
        raise ValueError("cross_entropy: mask keeps no positions")
    return mul(sum_(mul(picked, mask)), -1.0 / kept)
