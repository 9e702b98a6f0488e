"""Tiny autoregressive transformer policy with evidence injection.

Input embeddings get two residual evidence paths, both through one shared
linear projection from evidence space to model space and both scaled by
zero-initialized learnable scalars, so an untrained model is bitwise a
plain language model:

    at <EVIDENCE_SUMMARY> tokens:  h + alpha * proj(e_g)
    at part tokens:                h + gamma * proj(e_k)   (stage-gated)

The part path fires only at positions whose stage is PART_EVIDENCE under
the prefix-causal rule in `transcript.StageTracker`; generation feeds the
tracker one emitted token at a time, so injection decisions always match
what a later parse of the finished sequence reports.

Generation recomputes the full prefix each step (no KV cache); batches of
rollouts run in lockstep so the heavy lifting stays in big matmuls, with
one counter-based RNG stream per sequence so results do not depend on
batch composition.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import autodiff as ad
from .numerics.tensor import tensor_bytes, tensor_from_bytes
from .parts import NUM_PARTS, EvidenceBundle
from .transcript import Stage, StageTracker, Vocab, get_vocab

CKPT_MAGIC = b"PGRCKPT1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    context: int = 512
    evidence_dim: int = 32

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class InjectionMode:
    """Runtime ablation switches for the evidence pathway."""

    stage_gated: bool = True  # False: part path fires at every part token
    zero_evidence: bool = False  # True: evidence rows replaced by zeros


FULL_INJECTION = InjectionMode()


@dataclass(frozen=True)
class GateState:
    inject_part: bool


@dataclass
class Block:
    ln1_g: ad.Parameter
    wq: ad.Parameter
    wk: ad.Parameter
    wv: ad.Parameter
    wo: ad.Parameter
    ln2_g: ad.Parameter
    w1: ad.Parameter
    b1: ad.Parameter
    w2: ad.Parameter
    b2: ad.Parameter

    def parameters(self) -> list[ad.Parameter]:
        return [self.ln1_g, self.wq, self.wk, self.wv, self.wo,
                self.ln2_g, self.w1, self.b1, self.w2, self.b2]


@dataclass
class PolicyParams:
    config: ModelConfig
    tok_emb: ad.Parameter
    pos_emb: ad.Parameter
    blocks: list[Block]
    ln_f_g: ad.Parameter
    out_proj: ad.Parameter
    alpha: ad.Parameter
    gamma: ad.Parameter
    evid_proj: ad.Parameter  # (evidence_dim, d_model), bias-free on purpose
    vocab_fingerprint: str = field(default="")

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0,
               vocab: Vocab | None = None) -> "PolicyParams":
        vocab = vocab or get_vocab()
        if config.vocab_size != len(vocab):
            raise ValueError(f"config vocab_size {config.vocab_size} != vocabulary {len(vocab)}")
        rng = np.random.default_rng(seed)
        d, v = config.d_model, config.vocab_size

        def mat(name, rows, cols):
            return ad.Parameter(name, rng.normal(size=(rows, cols)) / np.sqrt(rows))

        blocks = []
        for i in range(config.n_layers):
            p = f"blocks.{i}."
            blocks.append(Block(
                ln1_g=ad.Parameter(p + "ln1_g", np.ones(d)),
                wq=mat(p + "wq", d, d), wk=mat(p + "wk", d, d),
                wv=mat(p + "wv", d, d), wo=mat(p + "wo", d, d),
                ln2_g=ad.Parameter(p + "ln2_g", np.ones(d)),
                w1=mat(p + "w1", d, config.d_ff),
                b1=ad.Parameter(p + "b1", np.zeros(config.d_ff)),
                w2=mat(p + "w2", config.d_ff, d),
                b2=ad.Parameter(p + "b2", np.zeros(d)),
            ))
        return cls(
            config=config,
            tok_emb=ad.Parameter("tok_emb", rng.normal(size=(v, d)) * 0.05),
            pos_emb=ad.Parameter("pos_emb", rng.normal(size=(config.context, d)) * 0.01),
            blocks=blocks,
            ln_f_g=ad.Parameter("ln_f_g", np.ones(d)),
            out_proj=mat("out_proj", d, v),
            alpha=ad.Parameter("alpha", 0.0),
            gamma=ad.Parameter("gamma", 0.0),
            evid_proj=mat("evid_proj", config.evidence_dim, d),
            vocab_fingerprint=vocab.fingerprint(),
        )

    def parameters(self) -> list[ad.Parameter]:
        ps = [self.tok_emb, self.pos_emb]
        for b in self.blocks:
            ps.extend(b.parameters())
        ps += [self.ln_f_g, self.out_proj, self.alpha, self.gamma, self.evid_proj]
        return ps

    def named_parameters(self) -> dict[str, ad.Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def clone(self) -> "PolicyParams":
        """Deep copy of the parameter values (used for frozen references)."""
        dup = PolicyParams.create(self.config, seed=0)
        for name, p in dup.named_parameters().items():
            p.value = self.named_parameters()[name].value.copy()
        dup.vocab_fingerprint = self.vocab_fingerprint
        return dup


def rmsnorm(x: ad.Node, gain: ad.Parameter, eps: float = 1e-6) -> ad.Node:
    scale = ad.power(ad.mean(x * x, axis=-1, keepdims=True) + eps, -0.5)
    return x * scale * gain


def _causal_bias(t: int) -> np.ndarray:
    bias = np.zeros((t, t))
    bias[np.triu_indices(t, 1)] = -1e9
    return bias


def _attention(x: ad.Node, block: Block, cfg: ModelConfig) -> ad.Node:
    b, t, d = x.value.shape
    h, dh = cfg.n_heads, cfg.head_dim

    def heads(w):
        proj = ad.matmul(x, w)  # (B, T, D)
        return ad.transpose(ad.reshape(proj, (b, t, h, dh)), (0, 2, 1, 3))  # (B, H, T, dh)

    q, k, v = heads(block.wq), heads(block.wk), heads(block.wv)
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = ad.softmax(scores + ad.constant(_causal_bias(t)), axis=-1)
    mixed = ad.matmul(attn, v)  # (B, H, T, dh)
    merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, t, d))
    return ad.matmul(merged, block.wo)


def _evidence_matrix(bundle: EvidenceBundle, mode: InjectionMode) -> ad.Node:
    """Rows 0..7: per-part evidence; row 8: the global summary."""
    if mode.zero_evidence:
        d = bundle.e.value.shape[1]
        return ad.constant(np.zeros((NUM_PARTS + 1, d)))
    return ad.concat([bundle.e, ad.reshape(bundle.e_g, (1, -1))], axis=0)


def injection_selectors(tokens: np.ndarray, vocab: Vocab,
                        mode: InjectionMode = FULL_INJECTION) -> tuple[np.ndarray, np.ndarray]:
    """Constant 0/1 matrices (T, 9) picking evidence rows per position.

    The global selector marks <EVIDENCE_SUMMARY> positions (row 8); the
    part selector marks part-token positions whose stage is PART_EVIDENCE
    under the prefix-causal rule (or every part token when the gate is
    ablated).  Selectors are data, not parameters, so injection reduces to
    two matmuls that stay differentiable w.r.t. evidence and projection.
    """
    t = len(tokens)
    m_glob = np.zeros((t, NUM_PARTS + 1))
    m_part = np.zeros((t, NUM_PARTS + 1))
    tracker = StageTracker(vocab)
    for pos, tid in enumerate(tokens):
        tid = int(tid)
        stage = tracker.feed(tid)
        if tid == vocab.evidence_summary_id:
            m_glob[pos, NUM_PARTS] = 1.0
        part = vocab.part_of(tid)
        if part is not None and (not mode.stage_gated or stage == Stage.PART_EVIDENCE):
            m_part[pos, int(part)] = 1.0
    return m_glob, m_part


def embed_with_injection(token_id: int, position: int, bundle: EvidenceBundle | None,
                         gate: GateState, params: PolicyParams,
                         mode: InjectionMode = FULL_INJECTION,
                         vocab: Vocab | None = None) -> ad.Node:
    """Single-position view of the embedding rule (the batched forward
    applies the same arithmetic through selector matrices)."""
    vocab = vocab or get_vocab()
    h = ad.gather_rows(params.tok_emb, np.array(token_id)) + \
        ad.gather_rows(params.pos_emb, np.array(position))
    is_summary = token_id == vocab.evidence_summary_id
    part = vocab.part_of(token_id)
    if (is_summary or part is not None) and bundle is None:
        raise ValueError("evidence-bearing token with no bundle")
    if bundle is None:
        return h
    e_mat = _evidence_matrix(bundle, mode)
    if is_summary:
        e_g = ad.reshape(ad.getitem(e_mat, (slice(NUM_PARTS, NUM_PARTS + 1),)), (1, -1))
        return h + params.alpha * ad.reshape(ad.matmul(e_g, params.evid_proj), (-1,))
    if part is not None and gate.inject_part:
        e_k = ad.reshape(ad.getitem(e_mat, (slice(int(part), int(part) + 1),)), (1, -1))
        return h + params.gamma * ad.reshape(ad.matmul(e_k, params.evid_proj), (-1,))
    return h


def policy_logits(token_matrix: np.ndarray, bundles, params: PolicyParams,
                  mode: InjectionMode = FULL_INJECTION,
                  vocab: Vocab | None = None) -> ad.Node:
    """Next-token logits (B, T, V) for a batch of token rows.

    `bundles` is one EvidenceBundle per row, or None to disable the
    injection machinery entirely (plain language model).
    """
    vocab = vocab or get_vocab()
    cfg = params.config
    token_matrix = np.asarray(token_matrix, dtype=np.int64)
    if token_matrix.ndim != 2:
        raise ValueError("token_matrix must be (B, T)")
    b, t = token_matrix.shape
    if t > cfg.context:
        raise ValueError(f"sequence length {t} exceeds context {cfg.context}")

    x = ad.gather_rows(params.tok_emb, token_matrix) + \
        ad.gather_rows(params.pos_emb, np.arange(t))
    if bundles is not None:
        if len(bundles) != b:
            raise ValueError("one bundle per batch row required")
        globs, parts_sel = [], []
        for row in token_matrix:
            m_glob, m_part = injection_selectors(row, vocab, mode)
            globs.append(m_glob)
            parts_sel.append(m_part)
        e_all = ad.stack([_evidence_matrix(bu, mode) for bu in bundles], axis=0)  # (B, 9, D)
        glob_pick = ad.matmul(ad.constant(np.stack(globs)), e_all)  # (B, T, D)
        part_pick = ad.matmul(ad.constant(np.stack(parts_sel)), e_all)
        inj = params.alpha * ad.matmul(glob_pick, params.evid_proj) + \
            params.gamma * ad.matmul(part_pick, params.evid_proj)
        x = x + inj

    for block in params.blocks:
        x = x + _attention(rmsnorm(x, block.ln1_g), block, cfg)
        hidden = ad.relu(ad.matmul(rmsnorm(x, block.ln2_g), block.w1) + block.b1)
        x = x + ad.matmul(hidden, block.w2) + block.b2
    x = rmsnorm(x, params.ln_f_g)
    return ad.matmul(x, params.out_proj)


def forward_logits(tokens, bundle: EvidenceBundle | None, params: PolicyParams,
                   mode: InjectionMode = FULL_INJECTION) -> ad.Node:
    """Next-token logits (T, V) for one sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    bundles = [bundle] if bundle is not None else None
    out = policy_logits(tokens[None, :], bundles, params, mode)
    return ad.reshape(out, out.value.shape[1:])


@dataclass
class GenerationResult:
    tokens: tuple[int, ...]  # prompt + generated
    prompt_len: int
    stepwise_logprobs: tuple[float, ...]  # one per generated token
    injection_events: int  # part-path injections in the final sequence
    hit_max_len: bool

    @property
    def generated(self) -> tuple[int, ...]:
        return self.tokens[self.prompt_len:]

    @property
    def logprob(self) -> float:
        return float(sum(self.stepwise_logprobs))


def _sample_row(logits_row: np.ndarray, temperature: float, greedy: bool,
                rng: np.random.Generator) -> tuple[int, float]:
    logp = logits_row / temperature
    logp = logp - logp.max()
    probs = np.exp(logp)
    probs /= probs.sum()
    if greedy:
        tid = int(probs.argmax())
    else:
        cdf = np.cumsum(probs)
        tid = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        tid = min(tid, len(probs) - 1)
    # report the untempered model logprob of the chosen token
    full = logits_row - logits_row.max()
    lse = np.log(np.exp(full).sum())
    return tid, float(full[tid] - lse)


def generate_batch(prompts, bundles, params: PolicyParams, temperature: float = 1.0,
                   seeds=None, max_len: int = 96, greedy: bool = False,
                   mode: InjectionMode = FULL_INJECTION,
                   vocab: Vocab | None = None) -> list[GenerationResult]:
    """Sample one continuation per prompt, all rows stepped in lockstep.

    Every sequence draws from its own counter-based RNG stream keyed by
    its seed, so the tokens it produces are independent of which other
    sequences share the batch.
    """
    vocab = vocab or get_vocab()
    if temperature <= 0:
        raise ValueError("temperature must be positive (use greedy=True for argmax)")
    if bundles is None or any(bu is None for bu in bundles):
        raise ValueError("generation requires an evidence bundle per prompt")
    prompts = [list(map(int, p)) for p in prompts]
    if len({len(p) for p in prompts}) != 1:
        raise ValueError("lockstep generation requires equal-length prompts")
    n = len(prompts)
    if seeds is None:
        seeds = list(range(n))
    rngs = [np.random.Generator(np.random.Philox(key=int(s))) for s in seeds]

    rows = [list(p) for p in prompts]
    prompt_len = len(prompts[0])
    trackers = [StageTracker(vocab) for _ in range(n)]
    for i, row in enumerate(rows):
        for tid in row:
            trackers[i].feed(tid)
    logprobs: list[list[float]] = [[] for _ in range(n)]
    events = [0] * n
    done = [False] * n
    final_len = [None] * n  # length of each row at the moment it finished

    with ad.no_grad():
        while not all(done) and len(rows[0]) < min(prompt_len + max_len, params.config.context):
            token_matrix = np.array(rows, dtype=np.int64)
            logits = policy_logits(token_matrix, bundles, params, mode, vocab).value
            last = logits[:, -1, :]
            for i in range(n):
                if done[i]:
                    rows[i].append(vocab.pad_id)  # keep lockstep shape; ignored
                    continue
                tid, lp = _sample_row(last[i], temperature, greedy, rngs[i])
                rows[i].append(tid)
                logprobs[i].append(lp)
                stage = trackers[i].feed(tid)
                part = vocab.part_of(tid)
                if part is not None and (not mode.stage_gated or stage == Stage.PART_EVIDENCE):
                    events[i] += 1
                if tid == vocab.eos_id:
                    done[i] = True
                    final_len[i] = len(rows[i])

    results = []
    for i in range(n):
        toks = rows[i] if final_len[i] is None else rows[i][: final_len[i]]
        results.append(GenerationResult(
            tokens=tuple(toks),
            prompt_len=prompt_len,
            stepwise_logprobs=tuple(logprobs[i]),
            injection_events=events[i],
            hit_max_len=final_len[i] is None,
        ))
    return results


def generate(prompt, bundle: EvidenceBundle, params: PolicyParams,
             temperature: float = 1.0, seed: int = 0, max_len: int = 96,
             greedy: bool = False, mode: InjectionMode = FULL_INJECTION,
             vocab: Vocab | None = None) -> GenerationResult:
    return generate_batch([prompt], [bundle], params, temperature=temperature,
                          seeds=[seed], max_len=max_len, greedy=greedy,
                          mode=mode, vocab=vocab)[0]


def sequence_logprobs_batch(token_matrix: np.ndarray, prompt_len: int, lengths,
                            bundles, params: PolicyParams,
                            mode: InjectionMode = FULL_INJECTION,
                            vocab: Vocab | None = None) -> tuple[ad.Node, np.ndarray]:
    """Per-token logprobs of the generated part of each row.

    Returns (logprobs (B, T-prompt_len) Node, mask (B, T-prompt_len)):
    entry [i, j] is log pi(token at prompt_len+j | prefix) and the mask
    marks positions before each row's length.  Rows must be padded to a
    common length; padding does not influence earlier positions (causal).
    """
    token_matrix = np.asarray(token_matrix, dtype=np.int64)
    b, t = token_matrix.shape
    if not 0 < prompt_len < t:
        raise ValueError("prompt_len must leave at least one generated token")
    lengths = np.asarray(lengths, dtype=np.int64)
    logits = policy_logits(token_matrix[:, :-1], bundles, params, mode, vocab)
    lp = ad.log_softmax(logits, axis=-1)
    n_gen = t - prompt_len
    rows = np.repeat(np.arange(b)[:, None], n_gen, axis=1)
    cols = np.tile(np.arange(prompt_len - 1, t - 1), (b, 1))
    targets = token_matrix[:, prompt_len:]
    picked = ad.getitem(lp, (rows, cols, targets))  # (B, n_gen)
    mask = (np.arange(prompt_len, t)[None, :] < lengths[:, None]).astype(np.float64)
    return picked, mask


def sequence_logprob(tokens, prompt_len: int, bundle: EvidenceBundle,
                     params: PolicyParams, mode: InjectionMode = FULL_INJECTION,
                     vocab: Vocab | None = None) -> tuple[ad.Node, ad.Node]:
    """(total logprob, per-token logprobs) of tokens[prompt_len:]."""
    tokens = np.asarray(tokens, dtype=np.int64)
    picked, mask = sequence_logprobs_batch(
        tokens[None, :], prompt_len, [len(tokens)], [bundle], params, mode, vocab)
    per_token = ad.reshape(picked, (picked.value.shape[1],))
    del mask  # single full-length row: everything is real
    return ad.sum_(per_token), per_token


# --- checkpoints ---

def save_checkpoint(path: str | Path, params: PolicyParams, training_stage: str,
                    parent_sha256: str | None = None, extra: dict | None = None) -> str:
    """Write header JSON + named parameter blobs; returns the file's sha256."""
    named = params.named_parameters()
    names = sorted(named)
    header = {
        "format": 1,
        "config": dataclasses.asdict(params.config),
        "vocab_fingerprint": params.vocab_fingerprint,
        "training_stage": training_stage,
        "parent_sha256": parent_sha256,
        "param_names": names,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    out = bytearray()
    out += CKPT_MAGIC
    out += struct.pack("<I", len(blob))
    out += blob
    for name in names:
        out += tensor_bytes(named[name].value)
    Path(path).write_bytes(bytes(out))
    return hashlib.sha256(bytes(out)).hexdigest()


def read_checkpoint_header(path: str | Path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError("bad checkpoint magic")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    return json.loads(raw[12 : 12 + hlen].decode())


def load_checkpoint(path: str | Path, vocab: Vocab | None = None) -> tuple[PolicyParams, dict]:
    vocab = vocab or get_vocab()
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError("bad checkpoint magic")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    header = json.loads(raw[12 : 12 + hlen].decode())
    if header["vocab_fingerprint"] != vocab.fingerprint():
        raise ValueError("checkpoint was written against a different vocabulary")
    config = ModelConfig(**header["config"])
    params = PolicyParams.create(config, seed=0, vocab=vocab)
    named = params.named_parameters()
    offset = 12 + hlen
    for name in header["param_names"]:
        arr, offset = tensor_from_bytes(raw, offset)
        if name not in named:
            raise ValueError(f"unknown parameter in checkpoint: {name}")
        if arr.shape != named[name].value.shape:
            raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {named[name].value.shape}")
        named[name].value = arr
    header["sha256"] = hashlib.sha256(raw).hexdigest()
    return params, header
