"""Run configuration: defaults, config files, and flag overrides.

Precedence is flags > config file > defaults.  Every consumer persists its
resolved configuration next to its outputs so a run can be reproduced from
the artifacts alone.  Unknown keys anywhere in a config file are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .evalbench.synthdata import DataConfig
from .pipeline import StackConfig
from .rewards import RewardWeights
from .training import GrpoConfig


def _build(cls, data: dict, where: str):
    """Instantiate a flat dataclass from a dict, rejecting unknown keys."""
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys in {where}: {sorted(unknown)}")
    return cls(**data)


@dataclass(frozen=True)
class RunConfig:
    """Every knob for the full pipeline, one serializable record."""

    master_seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    stack: StackConfig = field(default_factory=StackConfig)
    # Evidence-injection ablations.
    stage_gated: bool = True
    zero_evidence: bool = False
    # Annotation.
    n_clients: int = 3
    hallucination_rate: float = 0.1
    k_roi: int = 3
    # Rewards.
    weights: RewardWeights = field(default_factory=RewardWeights)
    # Stage 1.
    sft_epochs: int = 3
    sft_lr: float = 5e-5
    sft_batch_size: int = 1
    sft_optimizer: str = "sgd"
    # Stage 2.
    reject_candidates: int = 8
    reject_temperature: float = 1.0
    # Stage 3.
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    grpo_steps: int = 120
    # Decoding.
    max_len: int = 96

    def __post_init__(self):
        if self.n_clients < 2:
            raise ValueError("consensus filtering needs at least 2 clients")
        if self.sft_epochs < 1 or self.grpo_steps < 1:
            raise ValueError("epochs and steps must be positive")

    def to_json(self) -> dict:
        row = dataclasses.asdict(self)
        row["data"] = self.data.to_json()
        row["stack"] = self.stack.to_json()
        row["weights"] = dataclasses.asdict(self.weights)
        row["grpo"] = dataclasses.asdict(self.grpo)
        return row

    @classmethod
    def from_json(cls, row: dict) -> "RunConfig":
        row = dict(row)
        known = {f.name for f in fields(cls)}
        unknown = set(row) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "data" in row:
            row["data"] = _build(DataConfig, row["data"], "data")
        if "stack" in row:
            stack = dict(row["stack"])
            if "cutoffs" in stack:
                stack["cutoffs"] = tuple(stack["cutoffs"])
            row["stack"] = _build(StackConfig, stack, "stack")
        if "weights" in row:
            row["weights"] = _build(RewardWeights, row["weights"], "weights")
        if "grpo" in row:
            row["grpo"] = _build(GrpoConfig, row["grpo"], "grpo")
        return cls(**row)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def override(self, **changes) -> "RunConfig":
        """Apply dotted overrides ('grpo.lr') on top of this config."""
        top: dict = {}
        nested: dict[str, dict] = {}
        for key, value in changes.items():
            if value is None:
                continue
            if "." in key:
                section, leaf = key.split(".", 1)
                nested.setdefault(section, {})[leaf] = value
            else:
                top[key] = value
        cfg = self
        for section, leaves in nested.items():
            current = getattr(cfg, section)
            known = {f.name for f in fields(type(current))}
            unknown = set(leaves) - known
            if unknown:
                raise ValueError(f"unknown config keys in {section}: {sorted(unknown)}")
            cfg = dataclasses.replace(cfg, **{section: dataclasses.replace(current, **leaves)})
        if top:
            known = {f.name for f in fields(type(cfg))}
            unknown = set(top) - known
            if unknown:
                raise ValueError(f"unknown config keys: {sorted(unknown)}")
            cfg = dataclasses.replace(cfg, **top)
        return cfg


def resolve_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """defaults <- config file <- flag overrides (None values ignored)."""
    base = RunConfig.from_file(path) if path else RunConfig()
    return base.override(**overrides)


def write_resolved(config: RunConfig, out_dir: str | Path) -> Path:
    """Persist the resolved config next to a run's outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "resolved_config.json"
    target.write_text(json.dumps(config.to_json(), indent=1, sort_keys=True) + "\n")
    return target
