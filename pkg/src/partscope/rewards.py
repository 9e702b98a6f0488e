"""Multi-dimensional reward for part-grounded transcripts.

Four signals, aggregated as a weighted sum:

  * accuracy      — the parsed answer equals the ground-truth label;
  * format        — the transcript passes strict structural validation;
  * part grounding — plan/evidence F1, spatial existence of planned parts,
                     and a penalty for over-long plans;
  * consistency   — an evidence-only judge, shown the transcript with its
                    conclusion and answer stripped, independently reaches
                    the model's (correct) answer.

The judge is pluggable: `MockJudge` is a deterministic keyword rule for
tests and synthetic runs, `RecordedJudge` replays verdicts captured from a
live client so training runs are reproducible offline.  Judge transport
failures raise `JudgeError` so callers can retry or defer the sample; a
reward is never silently zeroed by an outage.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

from .parts import PartMaskSet
from .transcript import (
    ANOMALY_WORDS,
    CLEAN_WORDS,
    Stage,
    Transcript,
    Vocab,
    get_vocab,
    parse,
    validate_format,
)

REAL, FAKE, ABSTAIN = "REAL", "FAKE", "ABSTAIN"
LABELS = (REAL, FAKE)
VERDICTS = (REAL, FAKE, ABSTAIN)

_EVIDENCE_STAGES = (Stage.GLOBAL, Stage.PLANNING, Stage.PART_EVIDENCE)

# Plans longer than this many parts are penalized, 0.1 per extra part.
PLAN_BUDGET = 4
PLAN_PENALTY_SLOPE = 0.1


class JudgeError(RuntimeError):
    """Judge transport or protocol failure; retry or defer, never score 0."""


class JudgeClient(Protocol):
    def verdict(self, evidence: str) -> str:  # pragma: no cover - interface
        ...


@dataclass(frozen=True)
class PartScores:
    """Part-grounding subscores and their clamped combination."""

    f1: float
    existence_rate: float
    quantity_penalty: float
    value: float


@dataclass(frozen=True)
class RewardWeights:
    part: float = 0.4
    cons: float = 0.4
    fmt: float = 0.2


DEFAULT_WEIGHTS = RewardWeights()


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: float
    r_fmt: float
    r_part: PartScores
    r_cons: float
    total: float

    def to_json(self) -> dict:
        return {
            "r_acc": self.r_acc,
            "r_fmt": self.r_fmt,
            "r_part": {
                "f1": self.r_part.f1,
                "existence_rate": self.r_part.existence_rate,
                "quantity_penalty": self.r_part.quantity_penalty,
                "value": self.r_part.value,
            },
            "r_cons": self.r_cons,
            "total": self.total,
        }


def _check_label(label: str) -> None:
    if label not in LABELS:
        raise ValueError(f"label must be one of {LABELS}, got {label!r}")


def part_set_f1(planned: frozenset, examined: frozenset) -> float:
    """F1 overlap between the planned and examined part sets.

    Equals 2|P∩E| / (|P|+|E|).  Two empty sets score 0, not 1: an empty
    plan does no forensic work and must not be a reward optimum.
    """
    denom = len(planned) + len(examined)
    if denom == 0:
        return 0.0
    return 2.0 * len(planned & examined) / denom


def accuracy_reward(transcript: Transcript, label: str) -> float:
    _check_label(label)
    return 1.0 if transcript.answer == label else 0.0


def format_reward(transcript: Transcript, vocab: Vocab | None = None) -> float:
    return 1.0 if validate_format(transcript, vocab).ok else 0.0


def part_reward(
    transcript: Transcript,
    masks: PartMaskSet,
    *,
    f1_weight: float = 0.5,
    existence_weight: float = 0.5,
    penalty_slope: float = PLAN_PENALTY_SLOPE,
    plan_budget: int = PLAN_BUDGET,
) -> PartScores:
    """Score how well the plan is grounded in real, examined regions.

    existence_rate is the fraction of planned parts with a non-empty mask
    (an empty plan scores 0); the penalty charges `penalty_slope` per
    planned part beyond `plan_budget`; the combination is clamped to [0,1].
    """
    planned, examined = transcript.planned_parts, transcript.examined_parts
    f1 = part_set_f1(planned, examined)
    if planned:
        present = masks.present
        existence = sum(1 for p in planned if present[int(p)]) / len(planned)
    else:
        existence = 0.0
    penalty = penalty_slope * max(0, len(planned) - plan_budget)
    raw = f1_weight * f1 + existence_weight * existence - penalty
    return PartScores(f1, existence, penalty, min(1.0, max(0.0, raw)))


def evidence_text(transcript: Transcript, vocab: Vocab | None = None) -> str:
    """The transcript's evidence stages as text, conclusion/answer stripped.

    Keeps everything labeled global-evidence, planning, or part-evidence
    except the structural open/close tags; prompt tokens never qualify.
    """
    vocab = vocab or get_vocab()
    kept = [
        tid
        for tid, stage in zip(transcript.tokens, transcript.stage_labels)
        if stage in _EVIDENCE_STAGES and not vocab.is_tag(tid)
    ]
    return vocab.decode(kept)


def consistency_reward(
    transcript: Transcript,
    label: str,
    judge: JudgeClient,
    vocab: Vocab | None = None,
) -> float:
    """1 iff the evidence-only judge agrees with a correct answer.

    When the answer is wrong or malformed the product of indicators is 0
    no matter what the judge would say, so no call is made — replay files
    only need verdicts for correct-answer transcripts.
    """
    _check_label(label)
    if transcript.answer != label:
        return 0.0
    verdict = judge.verdict(evidence_text(transcript, vocab))
    if verdict not in VERDICTS:
        raise JudgeError(f"judge returned invalid verdict {verdict!r}")
    return 1.0 if verdict == transcript.answer else 0.0


def aggregate(
    r_acc: float,
    r_part: PartScores,
    r_cons: float,
    r_fmt: float,
    weights: RewardWeights = DEFAULT_WEIGHTS,
) -> RewardBreakdown:
    total = r_acc + weights.part * r_part.value + weights.cons * r_cons + weights.fmt * r_fmt
    return RewardBreakdown(r_acc=r_acc, r_fmt=r_fmt, r_part=r_part, r_cons=r_cons, total=total)


def compute_reward(
    tokens,
    label: str,
    masks: PartMaskSet,
    judge: JudgeClient,
    *,
    weights: RewardWeights = DEFAULT_WEIGHTS,
    vocab: Vocab | None = None,
) -> RewardBreakdown:
    """Parse a token sequence and score all four reward dimensions."""
    vocab = vocab or get_vocab()
    transcript = parse(tokens, vocab)
    return aggregate(
        accuracy_reward(transcript, label),
        part_reward(transcript, masks),
        consistency_reward(transcript, label, judge, vocab),
        format_reward(transcript, vocab),
        weights,
    )


# ---------------------------------------------------------------------------
# Judges


class MockJudge:
    """Deterministic keyword judge standing in for an external reviewer.

    FAKE iff the evidence contains at least `threshold` anomaly keywords
    (checked first, so anomalies outvote reassurance), REAL iff at least
    `threshold` clean keywords, otherwise ABSTAIN.
    """

    def __init__(self, threshold: int = 2):
        self._anomaly = frozenset(ANOMALY_WORDS)
        self._clean = frozenset(CLEAN_WORDS)
        self._threshold = threshold

    def verdict(self, evidence: str) -> str:
        words = evidence.split()
        if sum(1 for w in words if w in self._anomaly) >= self._threshold:
            return FAKE
        if sum(1 for w in words if w in self._clean) >= self._threshold:
            return REAL
        return ABSTAIN


def evidence_key(evidence: str) -> str:
    """Content hash used to key recorded judge verdicts."""
    return hashlib.sha256(evidence.encode("utf-8")).hexdigest()


class RecordedJudge:
    """Replays verdicts from a JSONL file keyed by evidence-content hash.

    An evidence text with no recorded verdict raises JudgeError: a gap in
    the recording is a transport failure to be fixed, not a zero reward.
    """

    def __init__(self, path: str | Path):
        self._path = Path(path)
        self._verdicts: dict[str, str] = {}
        for line in self._path.read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            self._verdicts[row["sha256"]] = row["verdict"]

    def __len__(self) -> int:
        return len(self._verdicts)

    def verdict(self, evidence: str) -> str:
        key = evidence_key(evidence)
        try:
            found = self._verdicts[key]
        except KeyError:
            raise JudgeError(
                f"no recorded verdict for evidence hash {key[:12]}… in {self._path}"
            ) from None
        if found not in VERDICTS:
            raise JudgeError(f"recorded verdict for {key[:12]}… is invalid: {found!r}")
        return found


def record_judge_responses(
    path: str | Path, judge: JudgeClient, texts: Iterable[str]
) -> int:
    """Consult a live judge and append verdicts to a replay file.

    Texts whose hash is already recorded are skipped; returns the number
    of new entries written.
    """
    path = Path(path)
    seen: set[str] = set()
    if path.exists():
        for line in path.read_text().splitlines():
            if line.strip():
                seen.add(json.loads(line)["sha256"])
    written = 0
    with path.open("a") as fh:
        for text in texts:
            key = evidence_key(text)
            if key in seen:
                continue
            row = {"sha256": key, "verdict": judge.verdict(text), "text": text}
            fh.write(json.dumps(row) + "\n")
            seen.add(key)
            written += 1
    return written
