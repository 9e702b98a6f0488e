"""Accuracy evaluation: leveled reports and perturbation-robustness grids.

A predictor is any callable mapping a SynthSample to a token sequence; the
decoded answer is read off the parsed transcript ("REAL", "FAKE", or
"MALFORMED" when the transcript is broken).  Reports are plain dicts
validated against pinned JSON schema files so their shape cannot drift
silently.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import jsonschema

from ..rewards import FAKE, LABELS, REAL
from ..transcript import Vocab, get_vocab, parse
from .perturbations import STANDARD_BLUR_SIGMAS, STANDARD_QUALITY_FACTORS, perturb
from .synthdata import LEVEL_NAMES, SynthSample

MALFORMED = "MALFORMED"

Predictor = Callable[[SynthSample], Sequence[int]]

_SCHEMA_FILES = {
    "leveled_accuracy": "report_schema.json",
    "robustness_grid": "robustness_schema.json",
}


def load_schema(kind: str) -> dict:
    try:
        name = _SCHEMA_FILES[kind]
    except KeyError:
        raise ValueError(f"no schema for report kind {kind!r}") from None
    return json.loads((Path(__file__).parent / name).read_text())


def validate_report(report: dict) -> None:
    """Raise jsonschema.ValidationError if the report shape has drifted."""
    schema = load_schema(report.get("kind", ""))
    jsonschema.validate(report, schema)


def classify(tokens: Sequence[int], vocab: Vocab | None = None) -> str:
    """Decoded verdict of one generated transcript."""
    return parse(tokens, vocab or get_vocab()).answer


def confusion_counts(
    labels: Iterable[str], predictions: Iterable[str]
) -> dict[tuple[str, str], int]:
    """(truth, predicted) -> count; predicted may be MALFORMED."""
    counts: dict[tuple[str, str], int] = {}
    labels = list(labels)
    predictions = list(predictions)
    if len(labels) != len(predictions):
        raise ValueError("labels and predictions must have equal length")
    for truth, pred in zip(labels, predictions):
        if truth not in LABELS:
            raise ValueError(f"ground-truth label must be in {LABELS}, got {truth!r}")
        counts[(truth, pred)] = counts.get((truth, pred), 0) + 1
    return counts


def _class_metrics(counts: dict[tuple[str, str], int], cls: str) -> dict:
    predicted = sum(v for (_, p), v in counts.items() if p == cls)
    actual = sum(v for (t, _), v in counts.items() if t == cls)
    hit = counts.get((cls, cls), 0)
    return {
        "precision": (hit / predicted) if predicted else None,
        "recall": (hit / actual) if actual else None,
        "support": actual,
    }


def score_predictions(labels: Sequence[str], predictions: Sequence[str]) -> dict:
    """Accuracy, malformed count, and per-class precision/recall for one split."""
    counts = confusion_counts(labels, predictions)
    n = len(labels)
    correct = counts.get((REAL, REAL), 0) + counts.get((FAKE, FAKE), 0)
    malformed = sum(v for (_, p), v in counts.items() if p == MALFORMED)
    return {
        "n": n,
        "accuracy": (correct / n) if n else 0.0,
        "malformed": malformed,
        "per_class": {REAL: _class_metrics(counts, REAL), FAKE: _class_metrics(counts, FAKE)},
    }


def evaluate_split(
    samples: Sequence[SynthSample], predictor: Predictor, vocab: Vocab | None = None
) -> dict:
    vocab = vocab or get_vocab()
    labels = [s.label for s in samples]
    predictions = [classify(predictor(s), vocab) for s in samples]
    return score_predictions(labels, predictions)


def evaluate_levels(
    test_levels: dict[int, Sequence[SynthSample]],
    predictor: Predictor,
    vocab: Vocab | None = None,
    *,
    checkpoint: str | None = None,
    master_seed: int | None = None,
) -> dict:
    """Per-level accuracy report, validated against the pinned schema."""
    vocab = vocab or get_vocab()
    level_rows = []
    all_labels: list[str] = []
    all_preds: list[str] = []
    for level in sorted(test_levels):
        samples = test_levels[level]
        labels = [s.label for s in samples]
        preds = [classify(predictor(s), vocab) for s in samples]
        all_labels += labels
        all_preds += preds
        row = {"level": level, "name": LEVEL_NAMES.get(level, f"level_{level}")}
        row.update(score_predictions(labels, preds))
        level_rows.append(row)
    report = {
        "kind": "leveled_accuracy",
        "checkpoint": checkpoint,
        "master_seed": master_seed,
        "levels": level_rows,
        "overall": score_predictions(all_labels, all_preds),
    }
    validate_report(report)
    return report


def standard_conditions() -> list[tuple[str, float | None]]:
    """The unperturbed baseline plus the standard jpeg/blur settings."""
    conditions: list[tuple[str, float | None]] = [("none", None)]
    conditions += [("jpeg", float(q)) for q in STANDARD_QUALITY_FACTORS]
    conditions += [("blur", float(s)) for s in STANDARD_BLUR_SIGMAS]
    return conditions


def robustness_report(
    samples: Sequence[SynthSample],
    predictor: Predictor,
    vocab: Vocab | None = None,
    *,
    conditions: Sequence[tuple[str, float | None]] | None = None,
    checkpoint: str | None = None,
) -> dict:
    """Accuracy under each degradation condition, one row per condition."""
    vocab = vocab or get_vocab()
    rows = []
    for kind, value in conditions if conditions is not None else standard_conditions():
        if kind == "none":
            degraded = list(samples)
        else:
            degraded = [replace(s, image=perturb(s.image, kind, value)) for s in samples]
        row: dict = {"kind": kind, "value": value}
        row.update(evaluate_split(degraded, predictor, vocab))
        row.pop("per_class")
        rows.append(row)
    report = {"kind": "robustness_grid", "checkpoint": checkpoint, "conditions": rows}
    validate_report(report)
    return report
