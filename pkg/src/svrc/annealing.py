"""Semi-deterministic inverse-temperature schedule.

Each quantizer layer keeps its own ceiling ``beta_max``. After the first step
the ceiling grows by ``K`` times the gap between the hard and soft
quantization errors, and the step's ``beta`` is drawn uniformly from
``[1, beta_max]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_K = 15.0


def quantization_gap(y, y_soft, y_hard, reduction: str = "sum") -> float:
    """|‖ŷ - y‖² - ‖ỹ - y‖²| over the whole batch.

    ``reduction="mean"`` divides both squared norms by the element count.
    """
    y, y_soft, y_hard = (np.asarray(getattr(a, "data", a), dtype=np.float64) for a in (y, y_soft, y_hard))
    if not (y.shape == y_soft.shape == y_hard.shape):
        raise ValueError(f"shape mismatch: {y.shape}, {y_soft.shape}, {y_hard.shape}")
    soft_err = np.sum((y_soft - y) ** 2)
    hard_err = np.sum((y_hard - y) ** 2)
    gap = abs(hard_err - soft_err)
    if reduction == "mean":
        gap /= max(y.size, 1)
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return float(gap)


@dataclass
class AnnealingState:
    K: float = DEFAULT_K
    seed: int = 0
    beta_max: float = 1.0
    beta_current: float = 1.0
    t: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)
        if self.beta_max < 1.0:
            raise ValueError("beta_max must be at least 1")

    @classmethod
    def resume(cls, beta_max: float, K: float = DEFAULT_K, seed: int = 0) -> "AnnealingState":
        """State that continues from an existing ceiling instead of restarting at 1."""
        return cls(K=K, seed=seed, beta_max=beta_max, beta_current=beta_max, t=1)

    def step(self, gap: float) -> float:
        if gap < 0:
            raise ValueError(f"quantization gap must be non-negative, got {gap}")
        self.t += 1
        if self.t == 1:
            self.beta_max = 1.0
            self.beta_current = 1.0
            return 1.0
        self.beta_max += self.K * gap
        self.beta_current = float(self.rng.uniform(1.0, self.beta_max))
        return self.beta_current


def step(state: AnnealingState, gap: float) -> float:
    return state.step(gap)


class PlateauDetector:
    """Flags a plateau when no relative improvement of `min_delta` has been
    seen for `patience` consecutive observations."""

    def __init__(self, patience: int, min_delta: float = 1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.wait = 0

    def update(self, value: float) -> bool:
        improved = not np.isfinite(self.best) or value < self.best - self.min_delta * abs(self.best)
        if improved:
            self.best = value
            self.wait = 0
            return False
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            return True
        return False
