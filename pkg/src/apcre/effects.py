"""Level / linear / nonlinear split of an effect vector over its levels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EffectDecomposition:
    """``values == level + linear_slope * x + nonlinear`` with ``x`` the centered index."""

    level: float
    linear_slope: float
    nonlinear: np.ndarray
    block: str = ""

    @property
    def centered_index(self) -> np.ndarray:
        n = self.nonlinear.shape[0]
        return np.arange(1, n + 1) - 0.5 * (n + 1)

    def reconstruct(self) -> np.ndarray:
        return self.level + self.linear_slope * self.centered_index + self.nonlinear

    @property
    def norms(self) -> dict[str, float]:
        x = self.centered_index
        n = x.shape[0]
        return {
            "level": abs(self.level) * np.sqrt(n),
            "linear": abs(self.linear_slope) * float(np.linalg.norm(x)),
            "nonlinear": float(np.linalg.norm(self.nonlinear)),
        }

    def as_dict(self) -> dict:
        return {
            "block": self.block,
            "level": self.level,
            "linear_slope": self.linear_slope,
            "nonlinear": self.nonlinear.tolist(),
            "norms": self.norms,
        }


def decompose_effect(values, block: str = "") -> EffectDecomposition:
    """Project effect values onto the constant and centered-linear vectors.

    The slope is in units of effect per level index.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.shape[0] < 2:
        raise ValueError("need at least 2 levels")
    n = v.shape[0]
    x = np.arange(1, n + 1) - 0.5 * (n + 1)
    level = float(v.mean())
    slope = float(x @ v / (x @ x))
    nonlinear = v - level - slope * x
    return EffectDecomposition(level, slope, nonlinear, block)
