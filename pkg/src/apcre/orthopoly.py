"""Orthonormal polynomial contrasts and the level/linear/nonlinear reparameterizations."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .design import APCGrid, DesignBundle, fe_design, indicator_matrix

COMPONENT_NAMES = ("level", "linear", "quadratic", "cubic", "quartic")


def component_labels(n: int) -> list[str]:
    names = list(COMPONENT_NAMES[:n])
    names += [f"degree_{d}" for d in range(len(names), n)]
    return names


@dataclass(frozen=True)
class OrthoBasis:
    n: int
    B: np.ndarray

    @property
    def labels(self) -> list[str]:
        return component_labels(self.n)


@dataclass(frozen=True)
class ReparamResult:
    transformed_matrix: np.ndarray
    transform: np.ndarray
    component_labels: list[str]


def centered_index(n: int) -> np.ndarray:
    """``k - (n + 1) / 2`` for ``k = 1..n``."""
    return np.arange(1, n + 1) - 0.5 * n - 0.5


@lru_cache(maxsize=128)
def _basis(n: int) -> np.ndarray:
    x = centered_index(n)
    B = np.empty((n, n))
    B[:, 0] = 1.0 / np.sqrt(n)
    for d in range(1, n):
        # x * q_{d-1} spans the same space as x**d modulo lower degrees but stays
        # well scaled; two Gram-Schmidt passes keep orthogonality at machine precision
        v = x * B[:, d - 1]
        for _ in range(2):
            v = v - B[:, :d] @ (B[:, :d].T @ v)
        B[:, d] = v / np.linalg.norm(v)
    B.setflags(write=False)
    return B


def orthonormal_poly_basis(n: int) -> OrthoBasis:
    """Columns are the constant, linear, quadratic, ... orthonormal contrasts.

    Built by Gram-Schmidt on powers of the centered index, so every column
    has a positive leading coefficient and the linear column increases with
    the level index.
    """
    if n < 2:
        raise ValueError(f"need at least 2 levels, got {n}")
    return OrthoBasis(n, _basis(int(n)))


def holford_linear_columns(grid: APCGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-cell centered linear columns ``(A_L, P_L, C_L)``; ``C_L == P_L - A_L``."""
    A_L = grid.index("age") - 0.5 * grid.a - 0.5
    P_L = grid.index("period") - 0.5 * grid.p - 0.5
    C_L = grid.index("cohort") - 0.5 * grid.c - 0.5
    return A_L, P_L, C_L


def _fe_factor_transform(n: int) -> np.ndarray:
    # Sum-to-zero coefficients of a zero-sum effect vector are its first n-1 entries.
    G = np.column_stack([centered_index(n), orthonormal_poly_basis(n).B[:, 2:]])
    return G[:-1, :]


def reparameterize_fe(W: np.ndarray, grid: APCGrid) -> ReparamResult:
    """Map the intercept + age + period sum-to-zero design onto
    ``(1, A_L, P_L, age nonlinear..., period nonlinear...)``.
    """
    expected = fe_design(grid, ["age", "period"]).W
    W = np.asarray(W, dtype=float)
    if W.shape != expected.shape or not np.array_equal(W, expected):
        raise ValueError(
            "W is not the intercept + age + period sum-to-zero design for this grid; "
            "the reparameterizing transform would be singular"
        )
    Ka = _fe_factor_transform(grid.a)
    Kp = _fe_factor_transform(grid.p)
    a1, p1 = grid.a - 1, grid.p - 1
    K = np.zeros((1 + a1 + p1, 1 + a1 + p1))
    K[0, 0] = 1.0
    # column order: intercept, A_L, P_L, age nonlinear, period nonlinear
    K[1 : 1 + a1, 1] = Ka[:, 0]
    K[1 + a1 :, 2] = Kp[:, 0]
    K[1 : 1 + a1, 3 : 3 + a1 - 1] = Ka[:, 1:]
    K[1 + a1 :, 3 + a1 - 1 :] = Kp[:, 1:]
    labels = ["level", "age_linear", "period_linear"]
    labels += [f"age_{name}" for name in component_labels(grid.a)[2:]]
    labels += [f"period_{name}" for name in component_labels(grid.p)[2:]]
    return ReparamResult(W @ K, K, labels)


def reparameterize_re(Z: np.ndarray, n_levels: int) -> ReparamResult:
    """``Z* = Z Delta`` with ``Delta`` the orthonormal polynomial basis."""
    Z = np.asarray(Z, dtype=float)
    if Z.shape[1] != n_levels:
        raise ValueError(f"Z has {Z.shape[1]} columns, expected {n_levels}")
    B = orthonormal_poly_basis(n_levels).B
    return ReparamResult(Z @ B, np.array(B), component_labels(n_levels))


def orthopoly_bundle(bundle: DesignBundle) -> DesignBundle:
    """Same model with every block expressed in orthonormal polynomial coordinates.

    Fixed blocks keep only their non-constant columns (the intercept carries
    the level); random blocks are rotated by their full basis.
    """
    grid = bundle.grid
    cols = [np.ones((grid.n, 1))]
    fe_slices = {"intercept": slice(0, 1)}
    codings = {"intercept": np.ones((1, 1))}
    labels = {"intercept": ["intercept"]}
    start = 1
    for name in bundle.fe_names:
        n_lev = grid.levels(name)
        G = orthonormal_poly_basis(n_lev).B[:, 1:]
        cols.append(indicator_matrix(grid, name) @ G)
        fe_slices[name] = slice(start, start + n_lev - 1)
        codings[name] = G
        labels[name] = [f"{name}_{c}" for c in component_labels(n_lev)[1:]]
        start += n_lev - 1
    Z_blocks = {}
    for name, Z in bundle.Z_blocks.items():
        res = reparameterize_re(Z, Z.shape[1])
        Z_blocks[name] = res.transformed_matrix
        codings[name] = res.transform
        labels[name] = [f"{name}_{c}" for c in res.component_labels]
    return DesignBundle(
        grid=grid,
        W=np.hstack(cols),
        Z_blocks=Z_blocks,
        labels=labels,
        parameterization="orthopoly",
        fe_slices=fe_slices,
        codings=codings,
    )
