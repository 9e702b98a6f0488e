"""Signal-guided annotation pipeline: ROI selection, consensus, synthesis.

Turns an unlabeled-looking sample into a five-stage training transcript in
three steps: (1) rank parts by their anomaly scores and keep the top K as
regions of interest, (2) ask several perception clients to describe each
ROI and keep only claims a strict majority agrees on, (3) have a
synthesizer client compose summary, plan, per-part claims, and verdict
into one transcript, which must parse and validate before the sample
counts as annotated.  Samples that lose their claims to consensus or
yield an invalid transcript are marked FAILED with a reason; downstream
training splits on that status.

All clients are pluggable; the mocks here derive descriptions from the
synthetic dataset's planted-artifact ground truth, with a configurable
hallucination rate to give the consensus filter real work.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

import numpy as np

from .parts import NUM_PARTS, PartId
from .transcript import (
    ANSWER_LITERALS,
    EVIDENCE_SUMMARY,
    STAGE_TAGS,
    Stage,
    Vocab,
    get_vocab,
    parse,
    validate_format,
)

ANNOTATED, FAILED = "ANNOTATED", "FAILED"

DEFAULT_ROI_COUNT = 3


class AnnotationClientError(RuntimeError):
    """Perception/synthesizer transport failure; retry, do not mark FAILED."""


# ---------------------------------------------------------------------------
# Ground truth handed to mock clients


@dataclass(frozen=True)
class GroundTruth:
    """What was actually planted in one sample, for mock describers."""

    label: str
    artifact_kinds: Mapping[PartId, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in ANSWER_LITERALS:
            raise ValueError(f"label must be one of {ANSWER_LITERALS}, got {self.label!r}")
        if self.label == "REAL" and self.artifact_kinds:
            raise ValueError("REAL samples cannot carry planted artifacts")


# Canonical per-kind claim wording.  Every word is in the transcript
# vocabulary, and every artifact claim carries at least two anomaly
# keywords so the evidence-only judge can reach a verdict from it.
ARTIFACT_CLAIMS: dict[str, str] = {
    "HIGH_FREQ_NOISE": "strong periodic noise artifact in this region",
    "BLUR_PATCH": "oversmoothed smeared texture with reduced detail",
    "BOUNDARY_SEAM": "visible seam and irregular boundary transition",
}

CLEAN_CLAIM = "texture appears natural and consistent"

# What a hallucinating describer says instead of the canonical claim.
HALLUCINATED_CLAIMS: tuple[str, ...] = (
    "faint ghosting near the outer edge",
    "blotchy corrupted patch with jagged edges",
    "suspicious warped structure here",
    "texture looks smooth and unaltered",
)


def canonical_claim(truth: GroundTruth, part: PartId) -> str:
    kind = truth.artifact_kinds.get(part)
    if kind is None:
        return CLEAN_CLAIM
    try:
        return ARTIFACT_CLAIMS[kind]
    except KeyError:
        raise ValueError(f"unknown artifact kind {kind!r} planted in {part.name}") from None


# ---------------------------------------------------------------------------
# Clients


class PerceptionClient(Protocol):
    def describe(self, image_ref: str, rois: Sequence[PartId]) -> dict[PartId, str]:
        ...  # pragma: no cover - interface


class SynthesizerClient(Protocol):
    def compose(
        self, summary: str, rois: Sequence[PartId], claims: Mapping[PartId, str], label: str
    ) -> list[str]:
        ...  # pragma: no cover - interface


class MockPerceptionClient:
    """Deterministic describer reading the planted-artifact ground truth.

    With probability `hallucination_rate` (decided independently per
    (client, sample, part) from a content-keyed counter RNG) the canonical
    claim is replaced by a divergent one, so several clients with the same
    rate disagree and exercise the consensus filter.
    """

    def __init__(
        self,
        client_id: str,
        truth: Mapping[str, GroundTruth],
        hallucination_rate: float = 0.0,
        seed: int = 0,
    ):
        if not 0.0 <= hallucination_rate <= 1.0:
            raise ValueError(f"hallucination_rate must be in [0, 1], got {hallucination_rate}")
        self.client_id = client_id
        self._truth = truth
        self._rate = hallucination_rate
        self._seed = seed

    def _rng(self, image_ref: str, part: PartId) -> np.random.Generator:
        material = f"{self._seed}|{self.client_id}|{image_ref}|{part.name}".encode()
        key = int.from_bytes(hashlib.sha256(material).digest()[:16], "big")
        return np.random.Generator(np.random.Philox(key=key))

    def describe(self, image_ref: str, rois: Sequence[PartId]) -> dict[PartId, str]:
        try:
            truth = self._truth[image_ref]
        except KeyError:
            raise AnnotationClientError(f"no ground truth for sample {image_ref!r}") from None
        out: dict[PartId, str] = {}
        for part in rois:
            claim = canonical_claim(truth, part)
            rng = self._rng(image_ref, part)
            if rng.random() < self._rate:
                claim = HALLUCINATED_CLAIMS[int(rng.integers(len(HALLUCINATED_CLAIMS)))]
            out[part] = claim
        return out


class MockSynthesizer:
    """Template synthesizer: summary, plan over the ROIs, one claim per
    ROI, and a label-matched conclusion."""

    def compose(
        self, summary: str, rois: Sequence[PartId], claims: Mapping[PartId, str], label: str
    ) -> list[str]:
        g_open, g_close = STAGE_TAGS[Stage.GLOBAL]
        p_open, p_close = STAGE_TAGS[Stage.PLANNING]
        e_open, e_close = STAGE_TAGS[Stage.PART_EVIDENCE]
        c_open, c_close = STAGE_TAGS[Stage.CONCLUSION]
        a_open, a_close = STAGE_TAGS[Stage.ANSWER]
        words = ["<BOS>", g_open, EVIDENCE_SUMMARY, *summary.split(), g_close, p_open]
        words += [f"<P_{p.name}>" for p in rois]
        words.append(p_close)
        words.append(e_open)
        for part in rois:
            words.append(f"<P_{part.name}>")
            words += claims[part].split()
        words.append(e_close)
        if label == "FAKE":
            conclusion = "evidence indicates a manipulated image"
        else:
            conclusion = "evidence indicates a genuine image"
        words += [c_open, *conclusion.split(), c_close, a_open, label, a_close, "<EOS>"]
        return words


# ---------------------------------------------------------------------------
# Pipeline steps


def select_rois(bundle, k: int = DEFAULT_ROI_COUNT) -> list[PartId]:
    """Top-k present parts by anomaly score, ties broken by part order."""
    if not 1 <= k <= NUM_PARTS:
        raise ValueError(f"k must be in [1, {NUM_PARTS}], got {k}")
    scores = np.asarray(bundle.a.value, dtype=float)
    present = np.asarray(bundle.present, dtype=bool)
    candidates = [p for p in PartId if present[int(p)]]
    ranked = sorted(candidates, key=lambda p: (-scores[int(p)], int(p)))
    return ranked[:k]


def normalize_claim(text: str) -> str:
    return " ".join(text.split()).lower()


def consensus_filter(descriptions: Sequence[Mapping[PartId, str]]) -> dict[PartId, str]:
    """Keep, per part, the claim asserted by a strict majority of clients.

    Claims are compared by normalized exact string; at most one claim per
    part can exceed half the client count, so the survivor is unique.  A
    1-1 split between two clients keeps nothing.
    """
    if len(descriptions) < 2:
        raise ValueError(f"consensus needs at least 2 clients, got {len(descriptions)}")
    survivors: dict[PartId, str] = {}
    parts = {part for desc in descriptions for part in desc}
    for part in sorted(parts):
        counts: dict[str, int] = {}
        for desc in descriptions:
            if part in desc:
                claim = normalize_claim(desc[part])
                counts[claim] = counts.get(claim, 0) + 1
        best_claim, best_count = max(counts.items(), key=lambda kv: kv[1])
        if best_count * 2 > len(descriptions):
            survivors[part] = best_claim
    return survivors


SUMMARY_CONTRAST_THRESHOLD = 0.05
"""Anomaly-score contrast above which the summary calls energy locally elevated.

The statistic is self-normalized per image (top-2 mean minus the mean of the
remaining parts), so the threshold is insensitive to encoder initialization
and to benign texture that lifts every part together."""


def signal_summary(bundle) -> str:
    """One sentence on whether spectral energy concentrates in a few parts.

    Localized manipulation lifts a couple of anomaly scores well above the
    rest; benign texture lifts all parts together and cancels out of the
    contrast.  The informative word leads the sentence so downstream readers
    (and the policy, which predicts it right after the summary token) get
    the finding before the boilerplate.
    """
    a = np.sort(np.asarray(bundle.a.value, dtype=float))[::-1]
    contrast = float(a[:2].mean() - a[2:].mean())
    level = "elevated" if contrast > SUMMARY_CONTRAST_THRESHOLD else "low"
    return f"{level} energy locally in the spectrum"


# ---------------------------------------------------------------------------
# Records


@dataclass(frozen=True)
class AnnotationRecord:
    sample_id: str
    label: str
    rois: tuple[PartId, ...]
    roi_scores: tuple[float, ...]
    claims: tuple[tuple[PartId, str], ...]
    status: str
    tokens: tuple[int, ...] = ()
    text: str = ""
    reason: str = ""

    def __post_init__(self):
        if self.status not in (ANNOTATED, FAILED):
            raise ValueError(f"status must be ANNOTATED or FAILED, got {self.status!r}")
        if self.status == FAILED and not self.reason:
            raise ValueError("FAILED records must carry a reason")
        if self.status == ANNOTATED and not self.tokens:
            raise ValueError("ANNOTATED records must carry a transcript")

    def to_json(self) -> str:
        payload = {
            "id": self.sample_id,
            "label": self.label,
            "rois": [p.name for p in self.rois],
            "roi_scores": list(self.roi_scores),
            "claims": {p.name: c for p, c in self.claims},
            "status": self.status,
            "tokens": list(self.tokens),
            "text": self.text,
            "reason": self.reason,
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "AnnotationRecord":
        row = json.loads(line)
        return cls(
            sample_id=row["id"],
            label=row["label"],
            rois=tuple(PartId[name] for name in row["rois"]),
            roi_scores=tuple(float(s) for s in row["roi_scores"]),
            claims=tuple(sorted((PartId[name], c) for name, c in row["claims"].items())),
            status=row["status"],
            tokens=tuple(int(t) for t in row["tokens"]),
            text=row["text"],
            reason=row["reason"],
        )


def synthesize(
    sample_id: str,
    rois: Sequence[PartId],
    roi_scores: Sequence[float],
    claims: Mapping[PartId, str],
    summary: str,
    label: str,
    synthesizer: SynthesizerClient | None = None,
    vocab: Vocab | None = None,
) -> AnnotationRecord:
    """Compose and check one transcript; FAILED captures why, never raises
    for content problems (only for client transport errors)."""
    vocab = vocab or get_vocab()
    synthesizer = synthesizer or MockSynthesizer()
    base = dict(
        sample_id=sample_id,
        label=label,
        rois=tuple(rois),
        roi_scores=tuple(float(s) for s in roi_scores),
        claims=tuple(sorted(claims.items())),
    )

    missing = [p.name for p in rois if p not in claims]
    if missing:
        return AnnotationRecord(
            **base, status=FAILED, reason=f"consensus eliminated claims for: {', '.join(missing)}"
        )
    if not rois:
        return AnnotationRecord(**base, status=FAILED, reason="no regions of interest")

    words = synthesizer.compose(summary, rois, claims, label)
    try:
        tokens = tuple(vocab.encode(" ".join(words)))
    except ValueError as err:
        return AnnotationRecord(**base, status=FAILED, reason=f"out-of-vocabulary synthesis: {err}")

    transcript = parse(tokens, vocab)
    check = validate_format(transcript, vocab)
    if not check.ok:
        return AnnotationRecord(
            **base, status=FAILED, reason=f"invalid transcript: {check.diagnostics[0]}"
        )
    if transcript.planned_parts != set(rois) or transcript.examined_parts != set(rois):
        return AnnotationRecord(
            **base, status=FAILED, reason="synthesis drifted from the planned regions"
        )
    if transcript.answer != label:
        return AnnotationRecord(**base, status=FAILED, reason="synthesis contradicts the label")
    return AnnotationRecord(**base, status=ANNOTATED, tokens=tokens, text=vocab.decode(tokens))


def annotate_sample(
    sample_id: str,
    label: str,
    bundle,
    clients: Sequence[PerceptionClient],
    synthesizer: SynthesizerClient | None = None,
    *,
    k: int = DEFAULT_ROI_COUNT,
    vocab: Vocab | None = None,
) -> AnnotationRecord:
    """Run ROI selection, description, consensus, and synthesis for one sample."""
    rois = select_rois(bundle, k)
    scores = np.asarray(bundle.a.value, dtype=float)
    roi_scores = [float(scores[int(p)]) for p in rois]
    if not rois:
        return AnnotationRecord(
            sample_id=sample_id, label=label, rois=(), roi_scores=(), claims=(),
            status=FAILED, reason="no present parts to examine",
        )
    descriptions = []
    for client in clients:
        desc = client.describe(sample_id, rois)
        stray = set(desc) - set(rois)
        if stray:
            names = ", ".join(p.name for p in sorted(stray))
            raise AnnotationClientError(f"client described parts outside the ROIs: {names}")
        descriptions.append(desc)
    claims = consensus_filter(descriptions)
    return synthesize(
        sample_id, rois, roi_scores, claims, signal_summary(bundle), label, synthesizer, vocab
    )


def split_annotations(
    records: Iterable[AnnotationRecord],
) -> tuple[list[AnnotationRecord], list[AnnotationRecord]]:
    """Partition into (annotated, failed) — the SFT set and the residual."""
    annotated, failed = [], []
    for record in records:
        (annotated if record.status == ANNOTATED else failed).append(record)
    return annotated, failed


# ---------------------------------------------------------------------------
# Expert-review hook and serialization


def load_review_rejections(path: str | Path) -> frozenset[str]:
    """Read a JSONL review file of {"id": ...} rows naming records to reject."""
    ids = set()
    for line in Path(path).read_text().splitlines():
        if line.strip():
            ids.add(json.loads(line)["id"])
    return frozenset(ids)


def apply_review(
    records: Iterable[AnnotationRecord],
    rejected_ids: frozenset[str] | set[str],
    reason: str = "rejected by expert review",
) -> list[AnnotationRecord]:
    """Demote reviewed-out records to FAILED; everything else passes through."""
    out = []
    for record in records:
        if record.status == ANNOTATED and record.sample_id in rejected_ids:
            record = replace(record, status=FAILED, reason=reason, tokens=(), text="")
        out.append(record)
    return out


def save_annotations(path: str | Path, records: Iterable[AnnotationRecord]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records))


def load_annotations(path: str | Path, vocab: Vocab | None = None) -> list[AnnotationRecord]:
    vocab = vocab or get_vocab()
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        record = AnnotationRecord.from_json(line)
        if record.tokens and vocab.decode(record.tokens) != record.text:
            raise ValueError(f"token/text mismatch in annotation {record.sample_id!r}")
        records.append(record)
    return records
