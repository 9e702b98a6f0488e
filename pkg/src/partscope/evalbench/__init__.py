"""Synthetic benchmark: data generation, degradations, accuracy, ratings."""

from .elo import EloTable, elo_update, expected_score
from .evaluate import evaluate_levels, robustness_report, validate_report
from .perturbations import gaussian_blur, jpeg_compress, perturb
from .synthdata import (
    ARTIFACT_KINDS,
    ArtifactSpec,
    DataConfig,
    SynthDataset,
    SynthSample,
    gen_dataset,
    load_dataset,
    save_dataset,
)

__all__ = [
    "ARTIFACT_KINDS",
    "ArtifactSpec",
    "DataConfig",
    "EloTable",
    "SynthDataset",
    "SynthSample",
    "elo_update",
    "evaluate_levels",
    "expected_score",
    "gaussian_blur",
    "gen_dataset",
    "jpeg_compress",
    "load_dataset",
    "perturb",
    "robustness_report",
    "save_dataset",
    "validate_report",
]
