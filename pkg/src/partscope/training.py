"""Three-stage policy training.

Stage 1 fits the policy (and, by default, the encoders feeding it) to
annotated transcripts with teacher-forced cross-entropy.  Stage 2 turns
annotation failures into extra supervision: sample M candidates per unsolved
image, keep those that are both well-formed and correct, curate at most one
per sample, and fine-tune on the survivors.  Stage 3 optimizes the full
multi-dimensional reward with group-normalized advantages, a per-token
clipped importance ratio, and a per-token KL penalty against the frozen
Stage-2 policy.

Every sampling decision is keyed by hashed (seed, sample, index) tuples, so
identical inputs reproduce identical runs bit-for-bit on one platform.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .numerics import autodiff as ad
from .parts import PartMaskSet
from .pipeline import ForensicModel, detach_bundle
from .reasoner import (
    FULL_INJECTION,
    GenerationResult,
    InjectionMode,
    PolicyParams,
    generate_batch,
    sequence_logprobs_batch,
)
from .rewards import (
    DEFAULT_WEIGHTS,
    JudgeClient,
    JudgeError,
    MockJudge,
    RewardBreakdown,
    RewardWeights,
    accuracy_reward,
    compute_reward,
)
from .transcript import Vocab, get_vocab, parse, validate_format

ADVANTAGE_EPSILON = 1e-8


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss stops being finite; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# Optimizers (one interface, two implementations)


class Sgd:
    """Plain momentum-free gradient descent: p -= lr * grad."""

    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, params: Sequence[ad.Parameter]) -> None:
        for p in params:
            # asarray keeps scalar parameters as 0-d arrays (numpy collapses
            # 0-d arithmetic to numpy scalars, which break in-place probes).
            p.value = np.asarray(p.value - self.lr * p.grad_value)


class Adam:
    """Adaptive-moment estimation with bias correction."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: Sequence[ad.Parameter]) -> None:
        self.t += 1
        b1_corr = 1.0 - self.beta1**self.t
        b2_corr = 1.0 - self.beta2**self.t
        for p in params:
            g = p.grad_value
            m = self._m.get(p.name)
            v = self._v.get(p.name)
            if m is None:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self._m[p.name], self._v[p.name] = m, v
            p.value = np.asarray(
                p.value - self.lr * (m / b1_corr) / (np.sqrt(v / b2_corr) + self.eps))


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return Sgd(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}; expected 'sgd' or 'adam'")


# ---------------------------------------------------------------------------
# Training pools


@dataclass
class PolicySample:
    """One training unit: image context, ground truth, optional transcript."""

    sample_id: str
    image: np.ndarray
    masks: PartMaskSet
    label: str
    tokens: tuple[int, ...] | None = None


def sft_pool(samples: Mapping[str, "object"], records: Iterable) -> list[PolicySample]:
    """Annotated records joined with their images -> supervised examples."""
    pool = []
    for rec in records:
        if rec.status != "ANNOTATED":
            continue
        sample = samples[rec.sample_id]
        pool.append(PolicySample(rec.sample_id, sample.image, sample.masks,
                                 rec.label, tuple(rec.tokens)))
    return pool


def rl_pool(samples: Mapping[str, "object"], records: Iterable) -> list[PolicySample]:
    """Annotation failures joined with their images -> unsolved queries."""
    pool = []
    for rec in records:
        if rec.status != "FAILED":
            continue
        sample = samples[rec.sample_id]
        pool.append(PolicySample(rec.sample_id, sample.image, sample.masks, rec.label))
    return pool


def pad_rows(rows: Sequence[Sequence[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token rows to a common length; returns (matrix, lengths)."""
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    width = int(lengths.max())
    matrix = np.full((len(rows), width), pad_id, dtype=np.int64)
    for i, row in enumerate(rows):
        matrix[i, : len(row)] = list(row)
    return matrix, lengths


def _stream_seed(*fields) -> int:
    digest = hashlib.sha256("|".join(str(f) for f in fields).encode()).digest()
    return int.from_bytes(digest[:16], "big")


def _write_jsonl(sink: IO[str] | None, row: dict) -> None:
    if sink is not None:
        sink.write(json.dumps(row, sort_keys=True) + "\n")
        sink.flush()


# ---------------------------------------------------------------------------
# Stage 1: supervised fine-tuning


def _batch_loss(batch: Sequence[PolicySample], model: ForensicModel,
                mode: InjectionMode, vocab: Vocab) -> ad.Node:
    """Mean next-token cross-entropy over the response tokens of one batch."""
    if model.train_encoders:
        bundles = [model.bundle_for(ex.image, ex.masks) for ex in batch]
    else:
        bundles = [model.frozen_bundle_for(ex.image, ex.masks) for ex in batch]
    matrix, lengths = pad_rows([ex.tokens for ex in batch], vocab.pad_id)
    picked, mask = sequence_logprobs_batch(
        matrix, 1, lengths, bundles, model.policy, mode, vocab)
    return ad.sum_(picked * ad.constant(mask)) * (-1.0 / mask.sum())


def sft_eval_loss(examples: Sequence[PolicySample], model: ForensicModel,
                  mode: InjectionMode = FULL_INJECTION,
                  vocab: Vocab | None = None) -> float:
    """Dataset-mean cross-entropy without touching any parameter."""
    vocab = vocab or get_vocab()
    with ad.no_grad():
        losses = [float(_batch_loss([ex], model, mode, vocab).value) for ex in examples]
    return float(np.mean(losses))


def run_sft(examples: Sequence[PolicySample], model: ForensicModel, *,
            epochs: int = 3, lr: float = 5e-5, batch_size: int = 1,
            optimizer: str = "sgd", seed: int = 0,
            mode: InjectionMode = FULL_INJECTION, vocab: Vocab | None = None,
            log: IO[str] | None = None) -> list[dict]:
    """Teacher-forced training on annotated transcripts; returns step logs.

    The prompt (the single start token) is masked out of the loss.  A
    non-finite loss aborts immediately with diagnostics attached.
    """
    vocab = vocab or get_vocab()
    if not examples:
        raise ValueError("run_sft needs at least one example")
    for ex in examples:
        if ex.tokens is None:
            raise ValueError(f"example {ex.sample_id!r} has no transcript")
        check = validate_format(parse(ex.tokens, vocab), vocab)
        if not check.ok:
            raise ValueError(
                f"example {ex.sample_id!r} is not format-valid: {check.diagnostics}")
    opt = make_optimizer(optimizer, lr)
    order_rng = np.random.Generator(np.random.Philox(key=_stream_seed(seed, "sft-order")))
    logs: list[dict] = []
    step = 0
    for epoch in range(epochs):
        order = order_rng.permutation(len(examples))
        for start in range(0, len(order), batch_size):
            batch = [examples[i] for i in order[start : start + batch_size]]
            loss = _batch_loss(batch, model, mode, vocab)
            loss_value = float(loss.value)
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}",
                    {"step": step, "epoch": epoch, "loss": loss_value,
                     "sample_ids": [ex.sample_id for ex in batch]})
            model.zero_grad()
            loss.backward()
            opt.step(model.trainable_parameters())
            row = {"step": step, "epoch": epoch, "loss": loss_value}
            logs.append(row)
            _write_jsonl(log, row)
            step += 1
    return logs


# ---------------------------------------------------------------------------
# Stage 2: rejection-sampling self-training


def rejection_sample(d2: Sequence[PolicySample], model: ForensicModel, *,
                     m_candidates: int = 8, temperature: float = 1.0,
                     seed: int = 0, judge: JudgeClient | None = None,
                     weights: RewardWeights = DEFAULT_WEIGHTS,
                     max_len: int = 96, mode: InjectionMode = FULL_INJECTION,
                     vocab: Vocab | None = None,
                     ) -> tuple[list[PolicySample], list[PolicySample]]:
    """Curate solved samples (D3) and the unsolved residual (D4).

    Per sample: draw M temperature-sampled candidates, keep those that are
    simultaneously well-formed and correct, and admit at most one -- the
    highest total reward, earliest draw winning ties.  Samples with no
    surviving candidate form the residual.
    """
    vocab = vocab or get_vocab()
    judge = judge or MockJudge()
    if m_candidates < 1:
        raise ValueError("m_candidates must be >= 1")
    d3: list[PolicySample] = []
    d4: list[PolicySample] = []
    prompt = [vocab.bos_id]
    for sample in d2:
        bundle = model.frozen_bundle_for(sample.image, sample.masks)
        seeds = [_stream_seed(seed, "reject", sample.sample_id, j)
                 for j in range(m_candidates)]
        results = generate_batch([prompt] * m_candidates, [bundle] * m_candidates,
                                 model.policy, temperature=temperature, seeds=seeds,
                                 max_len=max_len, mode=mode, vocab=vocab)
        best: GenerationResult | None = None
        best_total = -np.inf
        for res in results:
            transcript = parse(res.tokens, vocab)
            if not validate_format(transcript, vocab).ok:
                continue
            if accuracy_reward(transcript, sample.label) != 1.0:
                continue
            breakdown = compute_reward(res.tokens, sample.label, sample.masks,
                                       judge, weights=weights, vocab=vocab)
            if breakdown.total > best_total:
                best, best_total = res, breakdown.total
        if best is None:
            d4.append(sample)
        else:
            d3.append(dataclasses.replace(sample, tokens=tuple(best.tokens)))
    return d3, d4


def apply_candidate_review(d3: Sequence[PolicySample], d4: Sequence[PolicySample],
                           rejected_ids: set[str],
                           ) -> tuple[list[PolicySample], list[PolicySample]]:
    """Reviewer veto: move rejected curated samples back into the residual."""
    kept = [s for s in d3 if s.sample_id not in rejected_ids]
    demoted = [dataclasses.replace(s, tokens=None) for s in d3
               if s.sample_id in rejected_ids]
    return kept, list(d4) + demoted


# ---------------------------------------------------------------------------
# Stage 3: group-normalized policy optimization


def compute_advantages(rewards: Sequence[float]) -> np.ndarray:
    """Group-normalized advantages: (R - mean) / (population std + 1e-8)."""
    arr = np.asarray(rewards, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError("advantages need a flat group of at least 2 rewards")
    if np.ptp(arr) == 0.0:  # identical rewards: exactly zero, no mean rounding
        return np.zeros_like(arr)
    return (arr - arr.mean()) / (arr.std() + ADVANTAGE_EPSILON)


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    batch_size: int = 8
    lr: float = 1e-6
    clip: float = 0.2
    kl_beta: float = 0.04
    temperature: float = 1.0
    max_len: int = 96
    optimizer: str = "adam"
    train_encoders: bool = False  # unfreeze the encoders during RL

    def __post_init__(self):
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2 for group normalization")
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must be in (0, 1)")


@dataclass
class GrpoGroup:
    """One query's rollouts with their rewards and normalized advantages."""

    query: PolicySample
    rollouts: list[GenerationResult]
    rewards: list[RewardBreakdown]
    advantages: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if len(self.advantages) == 0 and self.rewards:
            self.advantages = compute_advantages([b.total for b in self.rewards])


def _minimum(a: ad.Node, b: ad.Node) -> ad.Node:
    return a - ad.relu(a - b)


def _clip_node(x: ad.Node, lo: float, hi: float) -> ad.Node:
    return ad.relu(x - lo) - ad.relu(x - hi) + lo


def grpo_surrogate(token_matrix: np.ndarray, lengths, bundles,
                   row_advantages: np.ndarray, old_logprobs: np.ndarray,
                   ref_logprobs: np.ndarray, params: PolicyParams, *,
                   clip: float = 0.2, kl_beta: float = 0.04,
                   mode: InjectionMode = FULL_INJECTION,
                   vocab: Vocab | None = None) -> tuple[ad.Node, dict]:
    """Clipped-ratio policy loss with a per-token KL penalty.

    All rows share prompt length 1.  `old_logprobs` and `ref_logprobs` are
    (rows, T-1) arrays of per-token logprobs under the rollout-time policy
    and the frozen reference; positions past each row's length are ignored.
    Returns (loss node to minimize, measured statistics).
    """
    picked, mask = sequence_logprobs_batch(
        token_matrix, 1, lengths, bundles, params, mode, vocab)
    mask_c = ad.constant(mask)
    denom = float(mask.sum())
    if denom <= 0:
        raise ValueError("surrogate needs at least one generated token")
    # Masking inside the exponentials pins every padded position to
    # ratio == 1 and k3 == 0 exactly, so padding can neither overflow
    # nor leak into the objective.
    ratio = ad.exp((picked - ad.constant(old_logprobs)) * mask_c)
    adv = ad.constant(row_advantages[:, None])
    surrogate = _minimum(ratio * adv, _clip_node(ratio, 1.0 - clip, 1.0 + clip) * adv)
    ref_delta = (ad.constant(ref_logprobs) - picked) * mask_c
    k3 = ad.exp(ref_delta) - ref_delta - 1.0
    objective = ad.sum_(surrogate * mask_c) * (1.0 / denom) \
        - kl_beta * ad.sum_(k3 * mask_c) * (1.0 / denom)
    loss = objective * -1.0
    ratio_v = ratio.value
    stats = {
        "mean_kl": float((k3.value * mask).sum() / denom),
        "clip_frac": float(((np.abs(ratio_v - 1.0) > clip) * mask).sum() / denom),
        "mean_ratio": float((ratio_v * mask).sum() / denom),
    }
    return loss, stats


@dataclass
class GrpoStepResult:
    metrics: dict
    deferred: list[PolicySample]
    groups: list[GrpoGroup]


def grpo_step(queries: Sequence[PolicySample], model: ForensicModel,
              ref_policy: PolicyParams, judge: JudgeClient, config: GrpoConfig,
              optimizer, *, step: int = 0, seed: int = 0,
              weights: RewardWeights = DEFAULT_WEIGHTS,
              mode: InjectionMode = FULL_INJECTION,
              vocab: Vocab | None = None) -> GrpoStepResult:
    """One batch: rollouts, rewards, advantages, a single optimizer step.

    A judge failure defers the whole query to the next batch -- its group is
    excluded from this update and returned in `deferred`, never dropped.
    """
    vocab = vocab or get_vocab()
    prompt = [vocab.bos_id]
    g = config.group_size

    grad_bundles = []
    for q in queries:
        if model.train_encoders:
            grad_bundles.append(model.bundle_for(q.image, q.masks))
        else:
            grad_bundles.append(model.frozen_bundle_for(q.image, q.masks))
    rollout_bundles = [detach_bundle(b) for b in grad_bundles]

    rows = len(queries) * g
    seeds = [_stream_seed(seed, "grpo", step, queries[i // g].sample_id, i % g)
             for i in range(rows)]
    results = generate_batch([prompt] * rows,
                             [rollout_bundles[i // g] for i in range(rows)],
                             model.policy, temperature=config.temperature,
                             seeds=seeds, max_len=config.max_len,
                             mode=mode, vocab=vocab)

    groups: list[GrpoGroup] = []
    kept_bundle_idx: list[int] = []
    deferred: list[PolicySample] = []
    for i, q in enumerate(queries):
        rollouts = results[i * g : (i + 1) * g]
        try:
            rewards = [compute_reward(r.tokens, q.label, q.masks, judge,
                                      weights=weights, vocab=vocab)
                       for r in rollouts]
        except JudgeError:
            deferred.append(q)
            continue
        groups.append(GrpoGroup(query=q, rollouts=rollouts, rewards=rewards))
        kept_bundle_idx.append(i)

    metrics = {
        "step": step,
        "mean_reward": 0.0,
        "mean_kl": 0.0,
        "clip_frac": 0.0,
        "r_part_mean": 0.0,
        "r_cons_mean": 0.0,
        "n_groups": len(groups),
        "n_deferred": len(deferred),
    }
    if not groups:
        return GrpoStepResult(metrics=metrics, deferred=deferred, groups=[])

    all_rollouts = [r for grp in groups for r in grp.rollouts]
    all_breakdowns = [b for grp in groups for b in grp.rewards]
    row_advantages = np.concatenate([grp.advantages for grp in groups])
    matrix, lengths = pad_rows([r.tokens for r in all_rollouts], vocab.pad_id)
    n_gen = matrix.shape[1] - 1
    old_lp = np.zeros((len(all_rollouts), n_gen))
    for i, r in enumerate(all_rollouts):
        old_lp[i, : len(r.stepwise_logprobs)] = r.stepwise_logprobs

    surrogate_bundles = []
    for gi, grp in enumerate(groups):
        surrogate_bundles += [grad_bundles[kept_bundle_idx[gi]]] * len(grp.rollouts)
    with ad.no_grad():
        ref_picked, _ = sequence_logprobs_batch(
            matrix, 1, lengths,
            [rollout_bundles[kept_bundle_idx[gi]] for gi, grp in enumerate(groups)
             for _ in grp.rollouts],
            ref_policy, mode, vocab)
    ref_lp = ref_picked.value

    loss, stats = grpo_surrogate(matrix, lengths, surrogate_bundles,
                                 row_advantages, old_lp, ref_lp, model.policy,
                                 clip=config.clip, kl_beta=config.kl_beta,
                                 mode=mode, vocab=vocab)
    loss_value = float(loss.value)
    if not np.isfinite(loss_value):
        raise TrainingDivergedError(f"non-finite policy loss at step {step}",
                                    {"step": step, "loss": loss_value})
    model.zero_grad()
    loss.backward()
    optimizer.step(model.trainable_parameters())

    metrics.update(
        mean_reward=float(np.mean([b.total for b in all_breakdowns])),
        mean_kl=stats["mean_kl"],
        clip_frac=stats["clip_frac"],
        r_part_mean=float(np.mean([b.r_part.value for b in all_breakdowns])),
        r_cons_mean=float(np.mean([b.r_cons for b in all_breakdowns])),
    )
    return GrpoStepResult(metrics=metrics, deferred=deferred, groups=groups)


def run_grpo(d4: Sequence[PolicySample], model: ForensicModel,
             judge: JudgeClient, config: GrpoConfig, *, steps: int,
             seed: int = 0, ref_policy: PolicyParams | None = None,
             weights: RewardWeights = DEFAULT_WEIGHTS,
             mode: InjectionMode = FULL_INJECTION, vocab: Vocab | None = None,
             log: IO[str] | None = None) -> list[dict]:
    """Optimize the reward for `steps` batches over the unsolved pool.

    The reference policy is a frozen copy of the incoming (Stage-2) policy
    unless one is supplied.  Deferred queries lead the next batch.
    """
    vocab = vocab or get_vocab()
    if not d4:
        raise ValueError("run_grpo needs a non-empty query pool")
    ref = ref_policy or model.policy.clone()
    model.train_encoders = config.train_encoders
    opt = make_optimizer(config.optimizer, config.lr)
    order_rng = np.random.Generator(np.random.Philox(key=_stream_seed(seed, "grpo-order")))
    queue: deque[PolicySample] = deque()
    carried: list[PolicySample] = []
    metrics: list[dict] = []
    for step in range(steps):
        batch = list(carried[: config.batch_size])
        carried = carried[config.batch_size :]
        while len(batch) < config.batch_size:
            if not queue:
                queue.extend(d4[i] for i in order_rng.permutation(len(d4)))
            batch.append(queue.popleft())
        result = grpo_step(batch, model, ref, judge, config, opt,
                           step=step, seed=seed, weights=weights,
                           mode=mode, vocab=vocab)
        carried += result.deferred
        metrics.append(result.metrics)
        _write_jsonl(log, result.metrics)
    return metrics
