"""Numerical checks of the constraints implied by random-effect APC models.

* ``verify_1re_sweep``: for one random factor, the influence-matrix rows that
  estimate that factor's level and linear slope vanish for every design and
  penalty, so both are zero whatever the data.
* ``quadratic_decomposition``: how the cohort quadratic column splits between
  the intercept, the fixed age effect, the period space and the part only the
  cohort effect can explain.
* ``transfer_property_check``: randomized check that moving the cohort level
  and slope into the fixed effects preserves the fit and lowers the penalty.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .design import FACTORS, APCGrid, apc_model, build_grid, fe_design, indicator_matrix
from .orthopoly import orthonormal_poly_basis, reparameterize_fe, reparameterize_re
from .penalized import PenaltySpec, cohort_contrasts, constraint_transfer, influence_matrix

DEFAULT_LAMBDAS = tuple(10.0**k for k in range(-3, 4))
SWEEP_TOL = 1e-9


@dataclass
class VerificationReport:
    re_factor: str
    tol: float
    rows: list[tuple[int, int, float, float, float]]

    @property
    def max_intercept(self) -> float:
        return max((r[3] for r in self.rows), default=0.0)

    @property
    def max_linear(self) -> float:
        return max((r[4] for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_intercept <= self.tol and self.max_linear <= self.tol

    def summary(self) -> dict:
        return {
            "re_factor": self.re_factor,
            "tol": self.tol,
            "designs": len(self.rows),
            "max_abs_intercept_weight": self.max_intercept,
            "max_abs_linear_weight": self.max_linear,
            "pass": self.passed,
        }


class SweepError(RuntimeError):
    pass


def one_re_weights(a: int, p: int, lam: float, re_factor: str = "cohort") -> tuple[float, float]:
    """``(max|alpha' M|, max|beta' M|)`` for one design and penalty ratio."""
    bundle = apc_model(build_grid(a, p), random=[re_factor])
    M = influence_matrix(bundle.Q, PenaltySpec({re_factor: lam}).diagonal(bundle))
    n_levels = bundle.Z_blocks[re_factor].shape[1]
    alpha, beta = cohort_contrasts(bundle.W.shape[1], n_levels)
    return float(np.max(np.abs(alpha @ M))), float(np.max(np.abs(beta @ M)))


def verify_1re_sweep(
    a_range: Iterable[int] = range(3, 31),
    p_range: Iterable[int] = range(3, 31),
    lambda_set: Sequence[float] = DEFAULT_LAMBDAS,
    re_factor: str = "cohort",
    tol: float = SWEEP_TOL,
) -> VerificationReport:
    """One row ``(a, p, lambda, max|alpha'M|, max|beta'M|)`` per design, ordered by key."""
    if re_factor not in FACTORS:
        raise ValueError(f"unknown factor {re_factor!r}")
    a_range, p_range, lambda_set = sorted(a_range), sorted(p_range), sorted(lambda_set)
    if not a_range or not p_range or min(a_range + p_range) < 2 or max(a_range + p_range) > 30:
        raise ValueError("a and p ranges must be nonempty and within 2..30")
    if any(not lam > 0 for lam in lambda_set):
        raise ValueError("penalty ratios must be positive")
    rows = []
    for a, p, lam in itertools.product(a_range, p_range, lambda_set):
        try:
            w_int, w_lin = one_re_weights(a, p, lam, re_factor)
        except np.linalg.LinAlgError as exc:
            raise SweepError(f"a={a}, p={p}, lambda={lam}: {exc}") from exc
        rows.append((a, p, float(lam), w_int, w_lin))
    return VerificationReport(re_factor, tol, rows)


@dataclass
class QuadDecomposition:
    total_sq: float
    intercept_sq: float
    age_sq: float
    period_sq: float
    cohort_residual_sq: float
    coefficients: dict[str, list[float]] = field(default_factory=dict)

    @property
    def pieces(self) -> tuple[float, float, float, float]:
        return (self.intercept_sq, self.age_sq, self.period_sq, self.cohort_residual_sq)

    @property
    def fractions(self) -> dict[str, float]:
        t = self.total_sq
        return {
            "fixed": (self.intercept_sq + self.age_sq) / t,
            "period": self.period_sq / t,
            "cohort": self.cohort_residual_sq / t,
        }

    def as_dict(self) -> dict:
        return {
            "total_sq": self.total_sq,
            "intercept_sq": self.intercept_sq,
            "age_sq": self.age_sq,
            "period_sq": self.period_sq,
            "cohort_residual_sq": self.cohort_residual_sq,
            "fractions": self.fractions,
            "coefficients": self.coefficients,
        }


def quadratic_decomposition(grid: APCGrid) -> QuadDecomposition:
    """Regress the rotated cohort quadratic column on intercept, age and period components."""
    if grid.c < 3:
        raise ValueError("cohort block needs at least 3 levels for a quadratic column")
    Zc = reparameterize_re(indicator_matrix(grid, "cohort"), grid.c).transformed_matrix
    target = Zc[:, 2]
    # constant components duplicate the intercept and are left out
    Xa = indicator_matrix(grid, "age") @ orthonormal_poly_basis(grid.a).B[:, 1:]
    Zp = indicator_matrix(grid, "period") @ orthonormal_poly_basis(grid.p).B[:, 1:]
    X = np.hstack([np.ones((grid.n, 1)), Xa, Zp])
    coef, *_ = np.linalg.lstsq(X, target, rcond=None)
    b0, ba, bp = coef[0], coef[1 : 1 + Xa.shape[1]], coef[1 + Xa.shape[1] :]
    resid = target - X @ coef
    return QuadDecomposition(
        total_sq=float(target @ target),
        intercept_sq=float(b0**2 * grid.n),
        age_sq=float(np.sum((Xa @ ba) ** 2)),
        period_sq=float(np.sum((Zp @ bp) ** 2)),
        cohort_residual_sq=float(resid @ resid),
        coefficients={"intercept": [float(b0)], "age": ba.tolist(), "period": bp.tolist()},
    )


@dataclass
class TransferCheck:
    passed: bool
    n_trials: int
    worst_fit_error: float
    worst_penalty_error: float
    counterexample: dict | None = None


def transfer_property_check(grid: APCGrid, n_trials: int = 1000, rng_seed: int = 5, tol: float = 1e-10) -> TransferCheck:
    """Draw standard-normal ``(beta*, u*)`` pairs and check the transfer identities.

    Fit vectors must agree within ``tol`` relative to their norm and the
    penalty must drop by ``u0^2 + u_L^2`` within ``tol`` relative to ``u*'u*``.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    W = fe_design(grid, ["age", "period"]).W
    Ws = reparameterize_fe(W, grid).transformed_matrix
    Zs = reparameterize_re(indicator_matrix(grid, "cohort"), grid.c).transformed_matrix
    rng = np.random.default_rng(rng_seed)
    worst_fit = worst_pen = 0.0
    for t in range(n_trials):
        beta = rng.standard_normal(Ws.shape[1])
        u = rng.standard_normal(Zs.shape[1])
        beta2, u2 = constraint_transfer(beta, u, grid.c)
        fit1 = Ws @ beta + Zs @ u
        fit2 = Ws @ beta2 + Zs @ u2
        fit_err = float(np.max(np.abs(fit1 - fit2)) / max(np.linalg.norm(fit1), 1e-300))
        drop = float(u @ u - u2 @ u2)
        pen_err = abs(drop - (u[0] ** 2 + u[1] ** 2)) / max(float(u @ u), 1.0)
        worst_fit, worst_pen = max(worst_fit, fit_err), max(worst_pen, pen_err)
        if fit_err > tol or pen_err > tol:
            return TransferCheck(
                False,
                t + 1,
                worst_fit,
                worst_pen,
                {"trial": t, "beta_star": beta.tolist(), "u_star": u.tolist(), "fit_error": fit_err, "penalty_error": pen_err},
            )
    return TransferCheck(True, n_trials, worst_fit, worst_pen)
