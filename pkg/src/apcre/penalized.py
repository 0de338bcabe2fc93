"""Penalized least squares for APC mixed models given the variance ratios.

The estimate minimizes ``|y - Q theta|^2 + theta' D theta`` where ``D`` is
diagonal: zero on fixed-effect columns and ``lambda_b`` on the columns of
random block ``b``.  An infinite ratio removes the block (its estimate is
exactly zero).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import linalg

from .design import DesignBundle
from .effects import EffectDecomposition, decompose_effect

MAX_CONDITION = 1e12


class SingularSystemError(np.linalg.LinAlgError):
    """The penalized normal matrix is singular to working precision."""


@dataclass(frozen=True)
class PenaltySpec:
    """Variance ratios ``sigma_e^2 / sigma_b^2`` for each random block."""

    lambdas: dict[str, float]

    def __post_init__(self):
        for name, lam in self.lambdas.items():
            if not lam > 0:
                raise ValueError(f"penalty ratio for {name!r} must be positive, got {lam}")

    def diagonal(self, bundle: DesignBundle) -> np.ndarray:
        """Penalty diagonal over the combined design (``inf`` marks a removed block)."""
        missing = set(bundle.re_names) - set(self.lambdas)
        if missing:
            raise ValueError(f"no penalty ratio for random blocks {sorted(missing)}")
        D = np.zeros(bundle.Q.shape[1])
        for name, sl in bundle.block_slices().items():
            if name in bundle.Z_blocks:
                D[sl] = self.lambdas[name]
        return D


@dataclass
class EffectEstimate:
    """Coefficients and per-level effects of a penalized fit."""

    theta: np.ndarray
    slices: dict[str, slice]
    effects: dict[str, np.ndarray]
    decomposition: dict[str, EffectDecomposition] = field(default_factory=dict)
    solver: str = "cholesky"

    @property
    def intercept(self) -> float:
        return float(self.theta[self.slices["intercept"]][0])

    def block(self, name: str) -> np.ndarray:
        return self.theta[self.slices[name]]


def _check_dims(Q, D, y=None):
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    D = np.asarray(D, dtype=float).ravel()
    if D.shape[0] != Q.shape[1]:
        raise ValueError(f"penalty has {D.shape[0]} entries for {Q.shape[1]} columns")
    if np.any(D < 0) or np.any(np.isnan(D)):
        raise ValueError("penalty entries must be nonnegative")
    if y is not None:
        y = np.asarray(y, dtype=float).ravel()
        if y.shape[0] != Q.shape[0]:
            raise ValueError(f"y has {y.shape[0]} entries for {Q.shape[0]} rows")
    return Q, D, y


def _finite_part(Q, D):
    keep = np.isfinite(D)
    return keep, Q[:, keep], D[keep]


def solve_penalized(Q, D, y) -> np.ndarray:
    """Penalized coefficient vector via a Cholesky factorization.

    Columns with an infinite penalty are dropped and returned as exact zeros.
    Raises ``SingularSystemError`` when the penalized normal matrix has a
    condition number above ``MAX_CONDITION``.
    """
    Q, D, y = _check_dims(Q, D, y)
    keep, Qk, Dk = _finite_part(Q, D)
    theta = np.zeros(Q.shape[1])
    if not keep.any():
        return theta
    A = Qk.T @ Qk + np.diag(Dk)
    evals = np.linalg.eigvalsh(A)
    if evals[0] <= evals[-1] / MAX_CONDITION:
        cond = evals[-1] / evals[0] if evals[0] > 0 else math.inf
        raise SingularSystemError(f"penalized normal matrix is singular (condition {cond:.3g})")
    theta[keep] = linalg.cho_solve(linalg.cho_factor(A, lower=True), Qk.T @ y)
    return theta


def solve_penalized_augmented(Q, D, y) -> np.ndarray:
    """Same minimizer as ``solve_penalized`` from least squares on ``[Q; sqrt(D)]``.

    The augmented matrix has the square root of the normal matrix's
    condition number, so a system that ``solve_penalized`` rejects can still
    be solved.  Accuracy along the design's null directions is then roughly
    ``eps * cond(Q'Q + D)`` relative to the data, not machine precision.
    """
    Q, D, y = _check_dims(Q, D, y)
    keep, Qk, Dk = _finite_part(Q, D)
    theta = np.zeros(Q.shape[1])
    if not keep.any():
        return theta
    A = np.vstack([Qk, np.diag(np.sqrt(Dk))])
    rhs = np.concatenate([y, np.zeros(Qk.shape[1])])
    sol, _, rank, _ = np.linalg.lstsq(A, rhs, rcond=None)
    if rank < Qk.shape[1]:
        raise SingularSystemError("augmented penalized system is rank deficient")
    theta[keep] = sol
    return theta


def influence_matrix(Q, D) -> np.ndarray:
    """``M`` with ``theta_hat = M y``: ``(Q'Q + D)^{-1} Q'``.

    Computed from a QR factorization of the augmented matrix
    ``[Q; sqrt(D)]``, which squares the condition number only implicitly.
    """
    Q, D, _ = _check_dims(Q, D)
    keep, Qk, Dk = _finite_part(Q, D)
    n, k = Qk.shape
    M = np.zeros((Q.shape[1], n))
    if k == 0:
        return M
    A = np.vstack([Qk, np.diag(np.sqrt(Dk))])
    U, R = np.linalg.qr(A)
    d = np.abs(np.diag(R))
    if d.min() <= d.max() / math.sqrt(MAX_CONDITION):
        raise SingularSystemError("penalized normal matrix is singular")
    # (A'A)^{-1} Q' = R^{-1} U_top'
    M[keep] = linalg.solve_triangular(R, U[:n].T, lower=False)
    return M


def influence_matrix_columnwise(Q, D) -> np.ndarray:
    """Influence matrix by solving the normal equations one data column at a time."""
    Q, D, _ = _check_dims(Q, D)
    n = Q.shape[0]
    M = np.empty((Q.shape[1], n))
    e = np.zeros(n)
    for i in range(n):
        e[i] = 1.0
        M[:, i] = solve_penalized(Q, D, e)
        e[i] = 0.0
    return M


def penalized_rss(Q, D, theta, y) -> float:
    """``(y - Q theta)'(y - Q theta) + theta' D theta`` (``inf * 0`` counts as 0)."""
    Q, D, y = _check_dims(Q, D, y)
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.shape[0] != Q.shape[1]:
        raise ValueError(f"theta has {theta.shape[0]} entries for {Q.shape[1]} columns")
    r = y - Q @ theta
    active = theta != 0
    return float(r @ r + np.sum(D[active] * theta[active] ** 2))


def cohort_contrasts(n_fixed: int, n_levels: int) -> tuple[np.ndarray, np.ndarray]:
    """Contrast vectors over the combined coefficients that estimate the random
    block's level (``alpha``) and centered-linear slope (``beta``).
    """
    alpha = np.concatenate([np.zeros(n_fixed), np.full(n_levels, 1.0 / n_levels)])
    idx = np.arange(1, n_levels + 1)
    b = idx - idx.mean()
    beta = np.concatenate([np.zeros(n_fixed), b / np.sum(b**2)])
    return alpha, beta


def effects_from_theta(bundle: DesignBundle, theta: np.ndarray) -> EffectEstimate:
    slices = bundle.block_slices()
    effects = {}
    for name, sl in slices.items():
        if name == "intercept":
            continue
        effects[name] = bundle.codings[name] @ theta[sl]
    decomposition = {name: decompose_effect(v) for name, v in effects.items()}
    return EffectEstimate(theta=theta, slices=slices, effects=effects, decomposition=decomposition)


def fit_penalized(
    bundle: DesignBundle, penalty: PenaltySpec | Mapping[str, float], y, augmented: bool = False
) -> EffectEstimate:
    """Penalized fit of ``bundle`` to ``y`` with ratios per random block.

    ``augmented=True`` uses ``solve_penalized_augmented``.
    """
    if not isinstance(penalty, PenaltySpec):
        penalty = PenaltySpec(dict(penalty))
    solver = solve_penalized_augmented if augmented else solve_penalized
    theta = solver(bundle.Q, penalty.diagonal(bundle), y)
    est = effects_from_theta(bundle, theta)
    if augmented:
        est.solver = "augmented"
    return est


def constraint_transfer(beta_star, u_star, c: int) -> tuple[np.ndarray, np.ndarray]:
    """Move the random block's level and linear component into the fixed effects.

    ``beta_star`` is ordered ``(b0, b_LA, b_LP, nonlinear...)`` against the
    columns ``(1, A_L, P_L, ...)``; ``u_star`` is ordered ``(u0, u_L,
    nonlinear...)`` against the orthonormal polynomial cohort columns.  The
    fitted values are unchanged and the penalty drops by ``u0^2 + u_L^2``.
    """
    beta = np.array(beta_star, dtype=float)
    u = np.array(u_star, dtype=float)
    k = 1.0 / math.sqrt(c)
    q = 1.0 / math.sqrt(np.sum((np.arange(1, c + 1) - 0.5 * c - 0.5) ** 2))
    u0, uL = u[0], u[1]
    beta[0] += k * u0
    beta[1] -= q * uL
    beta[2] += q * uL
    u[:2] = 0.0
    return beta, u
