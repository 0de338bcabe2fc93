"""Lexis grids and design matrices for fixed- and random-effect APC models.

Rows are always ordered age-major, period-minor: cell ``(i, j)`` sits at
row ``(i - 1) * p + (j - 1)`` and belongs to cohort ``k = a + j - i``.
Fixed-effect factors use sum-to-zero coding with the last level omitted
(encoded as -1 in every column of the block); random-effect factors use the
identity parameterization, one indicator column per level.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

FACTORS = ("age", "period", "cohort")
PARAMETERIZATIONS = ("sum_to_zero", "identity", "orthopoly")

RANK_RTOL = 1e-10


class DimensionError(ValueError):
    """Raised when a grid is too small to define an APC model."""


@dataclass(frozen=True)
class APCGrid:
    """An ``a x p`` Lexis table with the cohort index of every cell."""

    a: int
    p: int

    def __post_init__(self):
        if self.a < 2 or self.p < 2:
            raise DimensionError(f"need a >= 2 and p >= 2, got a={self.a}, p={self.p}")

    @property
    def c(self) -> int:
        return self.a + self.p - 1

    @property
    def n(self) -> int:
        return self.a * self.p

    @property
    def cells(self) -> list[tuple[int, int, int]]:
        return [(i, j, self.a + j - i) for i in range(1, self.a + 1) for j in range(1, self.p + 1)]

    def index(self, factor: str) -> np.ndarray:
        """1-based level index of ``factor`` for every row."""
        i = np.repeat(np.arange(1, self.a + 1), self.p)
        j = np.tile(np.arange(1, self.p + 1), self.a)
        if factor == "age":
            return i
        if factor == "period":
            return j
        if factor == "cohort":
            return self.a + j - i
        raise ValueError(f"unknown factor {factor!r}")

    def levels(self, factor: str) -> int:
        return {"age": self.a, "period": self.p, "cohort": self.c}[_check_factor(factor)]


def build_grid(a: int, p: int) -> APCGrid:
    return APCGrid(int(a), int(p))


def _check_factor(factor: str) -> str:
    if factor not in FACTORS:
        raise ValueError(f"unknown factor {factor!r}; expected one of {FACTORS}")
    return factor


def _ordered(factors: Iterable[str]) -> list[str]:
    chosen = {_check_factor(f) for f in factors}
    return [f for f in FACTORS if f in chosen]


def sum_to_zero_contrasts(n: int) -> np.ndarray:
    """``n x (n-1)`` coding matrix: identity on top, a row of -1 at the bottom."""
    return np.vstack([np.eye(n - 1), -np.ones((1, n - 1))])


def indicator_matrix(grid: APCGrid, factor: str) -> np.ndarray:
    idx = grid.index(_check_factor(factor))
    Z = np.zeros((grid.n, grid.levels(factor)))
    Z[np.arange(grid.n), idx - 1] = 1.0
    return Z


_SYMBOL = {"age": "alpha", "period": "beta", "cohort": "gamma"}


@dataclass(frozen=True)
class DesignBundle:
    """Fixed-effect matrix ``W`` plus named random-effect blocks.

    ``fe_slices`` locates each fixed block inside ``W``; ``codings`` maps a
    block's coefficients to its per-level effect values (the sum-to-zero
    contrast matrix, the identity, or an orthonormal polynomial basis).
    """

    grid: APCGrid
    W: np.ndarray
    Z_blocks: dict[str, np.ndarray]
    labels: dict[str, list[str]]
    parameterization: str
    fe_slices: dict[str, slice] = field(default_factory=dict)
    codings: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def re_names(self) -> list[str]:
        return list(self.Z_blocks)

    @property
    def fe_names(self) -> list[str]:
        return [name for name in self.fe_slices if name != "intercept"]

    @property
    def Q(self) -> np.ndarray:
        """Combined design ``(W | Z_1 | Z_2 ...)``."""
        return np.hstack([self.W, *self.Z_blocks.values()])

    def block_slices(self) -> dict[str, slice]:
        """Column slices of every block in the combined design."""
        out = dict(self.fe_slices)
        start = self.W.shape[1]
        for name, Z in self.Z_blocks.items():
            out[name] = slice(start, start + Z.shape[1])
            start += Z.shape[1]
        return out

    def column_labels(self) -> list[str]:
        cols = []
        for name in ["intercept", *self.fe_names, *self.re_names]:
            cols.extend(self.labels[name])
        return cols


def fe_design(grid: APCGrid, factors: Iterable[str]) -> DesignBundle:
    """Intercept followed by sum-to-zero blocks, in age-period-cohort order."""
    factors = _ordered(factors)
    if not factors:
        raise ValueError("at least one fixed factor is required")
    return apc_model(grid, fixed=factors, random=())


def re_design(grid: APCGrid, factor: str) -> np.ndarray:
    """Identity-parameterized indicator block for one factor."""
    return indicator_matrix(grid, factor)


def apc_model(grid: APCGrid, fixed: Iterable[str] | None = None, random: Iterable[str] = ("cohort",)) -> DesignBundle:
    """Design for an APC model with the given fixed and random factors.

    By default every factor that is not random is fixed.
    """
    random = _ordered(random)
    if fixed is None:
        fixed = [f for f in FACTORS if f not in random]
    fixed = _ordered(fixed)
    if set(fixed) & set(random):
        raise ValueError("a factor cannot be both fixed and random")

    cols = [np.ones((grid.n, 1))]
    labels = {"intercept": ["intercept"]}
    fe_slices = {"intercept": slice(0, 1)}
    codings = {"intercept": np.ones((1, 1))}
    start = 1
    for f in fixed:
        n_lev = grid.levels(f)
        C = sum_to_zero_contrasts(n_lev)
        cols.append(indicator_matrix(grid, f) @ C)
        fe_slices[f] = slice(start, start + n_lev - 1)
        labels[f] = [f"{_SYMBOL[f]}_{k}" for k in range(1, n_lev)]
        codings[f] = C
        start += n_lev - 1

    Z_blocks = {}
    for f in random:
        Z_blocks[f] = indicator_matrix(grid, f)
        labels[f] = [f"{_SYMBOL[f]}_{k}" for k in range(1, grid.levels(f) + 1)]
        codings[f] = np.eye(grid.levels(f))

    return DesignBundle(
        grid=grid,
        W=np.hstack(cols),
        Z_blocks=Z_blocks,
        labels=labels,
        parameterization="sum_to_zero" if fixed else "identity",
        fe_slices=fe_slices,
        codings=codings,
    )


def singular_values(M: np.ndarray) -> np.ndarray:
    return np.linalg.svd(np.asarray(M, dtype=float), compute_uv=False)


def numerical_rank(M: np.ndarray, tol: float = RANK_RTOL) -> int:
    s = singular_values(M)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def rank_deficiency(M: np.ndarray, tol: float = RANK_RTOL) -> int:
    """Column count minus numerical rank."""
    M = np.atleast_2d(M)
    return M.shape[1] - numerical_rank(M, tol)


def null_space_basis(M: np.ndarray, tol: float = RANK_RTOL) -> list[np.ndarray]:
    """Orthonormal basis of the right null space of ``M``.

    Singular values at or below ``tol`` times the largest count as zero.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        raise ValueError("empty matrix")
    _, s, Vt = np.linalg.svd(M, full_matrices=True)
    rank = int(np.sum(s > tol * s[0])) if s[0] > 0 else 0
    return [Vt[k].copy() for k in range(rank, M.shape[1])]


def intercept_redundancy_check(Z: np.ndarray) -> bool:
    """True iff the columns of ``Z`` add up to the all-ones vector exactly."""
    Z = np.asarray(Z, dtype=float)
    return bool(Z.size) and bool(np.array_equal(Z.sum(axis=1), np.ones(Z.shape[0])))


def rank_report(bundle: DesignBundle, tol: float = RANK_RTOL) -> dict:
    """Rank and null-space diagnostics of the combined design."""
    Q = bundle.Q
    basis = null_space_basis(Q, tol)
    return {
        "a": bundle.grid.a,
        "p": bundle.grid.p,
        "c": bundle.grid.c,
        "fixed": bundle.fe_names,
        "random": bundle.re_names,
        "columns": Q.shape[1],
        "rank": Q.shape[1] - len(basis),
        "deficiency": len(basis),
        "null_space": [v.tolist() for v in basis],
        "intercept_redundant": {name: intercept_redundancy_check(Z) for name, Z in bundle.Z_blocks.items()},
    }


def parse_factors(text: str | Sequence[str] | None) -> list[str]:
    """Parse ``"period,cohort"`` (or a sequence) into ordered factor names."""
    if text is None:
        return []
    if isinstance(text, str):
        items = [t.strip().lower() for t in text.split(",") if t.strip()]
    else:
        items = [t.lower() for t in text]
    aliases = {"a": "age", "p": "period", "c": "cohort"}
    return _ordered(aliases.get(t, t) for t in items)
