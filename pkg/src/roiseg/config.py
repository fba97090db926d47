"""JSON run configuration: phantom generation, training, and the hash that
binds evaluation reports to an exact effective configuration.

Schema (every key optional; unknown keys are hard errors):

    {
      "n_cases": 20,
      "phantom": { ... PhantomSpec fields ... },
      "train":   { ... TrainConfig fields ... }
    }
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .phantom import PhantomSpec


@dataclass
class TrainConfig:
    rf_variant: str = "RF64"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4        # L2 coefficient on conv kernels, in-loss
    lambda_c: float = 0.5
    dice_epsilon: float = 1e-4
    phase1_epochs: int = 4            # upper bound; early stop may fire first
    patience: int = 5                 # phase-1 evaluations without improvement
    phase2_epochs: int = 6
    val_fraction: float = 0.2
    k_folds: int = 4
    teacher_dice: float = 0.3         # locator val Dice gate for predicted boxes
    threshold: float = 0.5
    min_voxels: int = 2
    roi_margin: int = 1
    max_rois: int = 2                 # training-time cap on RoIs per volume
    augment: bool = True
    roi_shift: float = 0.5
    target_spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 0

    def to_json(self):
        doc = dataclasses.asdict(self)
        doc["target_spacing"] = list(self.target_spacing)
        return doc


@dataclass
class Config:
    n_cases: int = 20
    phantom: PhantomSpec = dataclasses.field(default_factory=PhantomSpec)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)

    def to_json(self):
        return {"n_cases": self.n_cases, "phantom": self.phantom.to_json(),
                "train": self.train.to_json()}


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _build(cls, doc, where):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValueError(f"unknown {where} config keys: {unknown}")
    return cls(**{k: _tuplify(v) for k, v in doc.items()})


def config_from_dict(doc: dict) -> Config:
    unknown = sorted(set(doc) - {"n_cases", "phantom", "train"})
    if unknown:
        raise ValueError(f"unknown top-level config keys: {unknown}")
    phantom = _build(PhantomSpec, doc.get("phantom", {}), "phantom")
    train = _build(TrainConfig, doc.get("train", {}), "train")
    n_cases = doc.get("n_cases", 20)
    if not isinstance(n_cases, int) or n_cases < 1:
        raise ValueError(f"n_cases must be a positive integer, got {n_cases!r}")
    return Config(n_cases=n_cases, phantom=phantom, train=train)


def load_config(path) -> Config:
    return config_from_dict(json.loads(Path(path).read_text()))


def config_hash(cfg: Config) -> str:
    """Hash of the fully-defaulted configuration, not just the file text."""
    canonical = json.dumps(cfg.to_json(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
