"""Differentiable-computation substrate: tensors, FFT, autodiff, grad checks."""

from .autodiff import (
    Node,
    Parameter,
    add,
    as_node,
    concat,
    constant,
    conv2d,
    cross_entropy,
    div,
    exp,
    gather_rows,
    getitem,
    grad_enabled,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
)
from .fft import fft2_complex, fft2d, ifft2_complex, ifft2d, pack_spectrum, unpack_spectrum
from .gradcheck import GradCheckReport, grad_check
from .tensor import (
    MAGIC,
    NonFiniteError,
    Tensor,
    as_tensor,
    check_finite,
    load_tensor,
    save_tensor,
    tensor_bytes,
    tensor_from_bytes,
)

__all__ = [
    "MAGIC",
    "GradCheckReport",
    "Node",
    "NonFiniteError",
    "Parameter",
    "Tensor",
    "add",
    "as_node",
    "as_tensor",
    "check_finite",
    "concat",
    "constant",
    "conv2d",
    "cross_entropy",
    "div",
    "exp",
    "fft2_complex",
    "fft2d",
    "gather_rows",
    "getitem",
    "grad_check",
    "grad_enabled",
    "ifft2_complex",
    "ifft2d",
    "load_tensor",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "pack_spectrum",
    "power",
    "relu",
    "reshape",
    "save_tensor",
    "sigmoid",
    "softmax",
    "stack",
    "sub",
    "sum_",
    "tanh",
    "tensor_bytes",
    "tensor_from_bytes",
    "transpose",
    "unpack_spectrum",
]
