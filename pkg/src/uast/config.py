"""Hyperparameters of a self-training run."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

from .errors import ConfigError

SELECTION_POLICIES = ("variance", "confidence", "none")
HARD_LABEL_MODES = ("sample", "argmax")
LATENT_MODES = ("mixture", "blend")


@dataclass
class RoundConfig:
    # basis extraction
    n_bases: Optional[int] = None  # None -> 2 per class
    hidden: tuple = (32, 32)
    objective_weights: tuple = (1.0, 1.0, 1.0)  # reconstruction, label gram, ortho
    stage1_epochs: int = 30
    stage1_lr: float = 0.05
    stage1_refine_steps: int = 500
    refine_lr: float = 1e-2
    refine_tol: float = 1e-6

    # pseudo-label EM
    temp: float = 1.0
    mix_weight: float = 1.0  # weight of the variance term for unlabeled rows
    em_iters: int = 10
    mc_samples: int = 64
    em_lr: float = 5e-4
    latent_mode: str = "mixture"

    # selection and retraining
    selection: str = "variance"
    hard_label: str = "sample"
    keep_fractions: tuple = (0.2, 0.4, 0.6)
    rounds: int = 3
    retrain_epochs: int = 4
    lr: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 32
    var_floor: float = 1e-6

    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.objective_weights = tuple(float(w) for w in self.objective_weights)
        self.keep_fractions = tuple(float(f) for f in self.keep_fractions)
        self.validate()

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.retrain_epochs < 1:
            raise ConfigError(f"retrain_epochs must be >= 1, got {self.retrain_epochs}")
        if self.em_iters < 1:
            raise ConfigError(f"em_iters must be >= 1, got {self.em_iters}")
        if self.mc_samples < 2:
            raise ConfigError(f"mc_samples must be >= 2, got {self.mc_samples}")
        if not self.var_floor > 0:
            raise ConfigError(f"var_floor must be positive, got {self.var_floor}")
        if not self.temp > 0:
            raise ConfigError(f"temp must be positive, got {self.temp}")
        if not self.keep_fractions or any(not 0.0 < f <= 1.0 for f in self.keep_fractions):
            raise ConfigError(f"keep fractions must lie in (0, 1], got {self.keep_fractions}")
        if len(self.objective_weights) != 3 or any(w < 0 for w in self.objective_weights):
            raise ConfigError("objective_weights needs three non-negative entries")
        if self.n_bases is not None and self.n_bases < 1:
            raise ConfigError(f"n_bases must be positive, got {self.n_bases}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        for name, allowed in (
            ("selection", SELECTION_POLICIES),
            ("hard_label", HARD_LABEL_MODES),
            ("latent_mode", LATENT_MODES),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def bases_for(self, n_classes: int) -> int:
        return self.n_bases if self.n_bases is not None else 2 * n_classes

    def keep_fraction(self, round_index: int) -> float:
        """Fraction for 0-based ``round_index``; the last entry repeats."""
        return self.keep_fractions[min(round_index, len(self.keep_fractions) - 1)]

    def replace(self, **changes) -> "RoundConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("hidden", "objective_weights", "keep_fractions"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "RoundConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown round settings: {unknown}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
