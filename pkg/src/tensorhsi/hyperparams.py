"""Loss weights and step-size schedule shared by the decomposition and the classifier."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

STEP_MODES = ("schedule", "backtracking", "als")


@dataclass(frozen=True)
class Hyperparams:
    """Every weight of the joint objective plus the optimizer settings.

    ``step_mode="schedule"`` uses ``lr0 * decay ** (iter // decay_every)``.
    ``step_mode="backtracking"`` starts from ``lr0``, doubles the previous
    accepted step on every iteration and halves it until the loss decreases,
    which makes the loss history monotone.
    """

    alpha: float = 0.01
    lambda1: float = 1e-4
    lambda2: float = 1e-4
    lambda3: float = 1e-4
    beta: float = 1.0
    gamma: float = 0.01
    lr0: float = 1e-3
    decay: float = 0.9
    decay_every: int = 10_000
    max_iters: int = 2000
    tol: float = 1e-10
    seed: int = 0
    step_mode: str = "schedule"

    def __post_init__(self):
        for name in ("alpha", "lambda1", "lambda2", "lambda3", "beta", "gamma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be a finite non-negative number, got {v!r}")
        if not (math.isfinite(self.lr0) and self.lr0 > 0):
            raise ValueError(f"lr0 must be positive, got {self.lr0!r}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must lie in (0, 1], got {self.decay!r}")
        if int(self.decay_every) != self.decay_every or self.decay_every < 1:
            raise ValueError(f"decay_every must be a positive integer, got {self.decay_every!r}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 0:
            raise ValueError(f"max_iters must be a non-negative integer, got {self.max_iters!r}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {self.seed!r}")
        if self.step_mode not in STEP_MODES:
            raise ValueError(f"step_mode must be one of {STEP_MODES}, got {self.step_mode!r}")

    def lr(self, iteration: int) -> float:
        return self.lr0 * self.decay ** (iteration // self.decay_every)

    def replace(self, **changes) -> "Hyperparams":
        return Hyperparams(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**d)
