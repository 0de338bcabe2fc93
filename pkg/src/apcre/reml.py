"""Restricted (residual) likelihood for Gaussian APC mixed models.

Convention for every value returned here::

    RL = -1/2 * [ log|V| + log|W' V^-1 W| + y' P y ]

with ``V = sigma_e^2 I + sum_b sigma_b^2 Z_b Z_b'`` and ``P`` the REML
projection.  Only the data-independent ``-(n - r)/2 * log(2 pi)`` term is
dropped, so differences of RL values are exact log-likelihood ratios.

Internally everything runs on error contrasts: with ``K`` an orthonormal
basis of the orthogonal complement of ``col(W)``,

    RL = -1/2 * [ log|K' V K| + z' (K' V K)^-1 z ] - 1/2 * log|W' W|,  z = K' y.

Variances on the boundary (``sigma_b^2 = 0``) need no special casing because
``V`` stays positive definite while ``sigma_e^2 > 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg, optimize

from .design import DesignBundle, numerical_rank
from .penalized import EffectEstimate, PenaltySpec, SingularSystemError, fit_penalized

GAMMA_FLOOR = 1e-8
GAMMA_CEIL = 1e12
MAX_EVALS = 10_000
MIN_LOG_STEP = 1e-6
MAX_LOG_STEP = 8.0
DEDUP_RTOL = 1e-4
DEGENERATE_RTOL = 1e-24


@dataclass(frozen=True)
class VarianceComponents:
    sigma2_e: float
    sigma2_re: dict[str, float]

    def __post_init__(self):
        if not self.sigma2_e > 0:
            raise ValueError(f"error variance must be positive, got {self.sigma2_e}")
        for name, s in self.sigma2_re.items():
            if not s >= 0:
                raise ValueError(f"variance of {name!r} must be nonnegative, got {s}")

    def ratios(self) -> dict[str, float]:
        """Penalty ratios ``sigma_e^2 / sigma_b^2`` (``inf`` for a zero variance)."""
        return {name: (self.sigma2_e / s if s > 0 else math.inf) for name, s in self.sigma2_re.items()}

    def as_dict(self) -> dict:
        return {"sigma2_e": self.sigma2_e, **{f"sigma2_{k}": v for k, v in self.sigma2_re.items()}}


def _as_blocks(Z_blocks) -> dict[str, np.ndarray]:
    if isinstance(Z_blocks, Mapping):
        return {k: np.asarray(v, dtype=float) for k, v in Z_blocks.items()}
    return {f"re{i}": np.asarray(v, dtype=float) for i, v in enumerate(Z_blocks)}


def _check_W(W: np.ndarray) -> int:
    r = numerical_rank(W)
    if r < W.shape[1]:
        raise np.linalg.LinAlgError(f"W has rank {r} < {W.shape[1]} columns")
    return r


def restricted_loglik(vc: VarianceComponents, W, Z_blocks, y) -> float:
    """Restricted log-likelihood by the direct ``V``-based formula."""
    W = np.asarray(W, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    Z_blocks = _as_blocks(Z_blocks)
    _check_W(W)
    if y.shape[0] != W.shape[0]:
        raise ValueError("y and W have different row counts")
    n = W.shape[0]
    V = vc.sigma2_e * np.eye(n)
    for name, Z in Z_blocks.items():
        V += vc.sigma2_re.get(name, 0.0) * (Z @ Z.T)
    cV = linalg.cho_factor(V, lower=True)
    logdet_V = 2.0 * np.sum(np.log(np.diag(cV[0])))
    ViW = linalg.cho_solve(cV, W)
    WtViW = W.T @ ViW
    cW = linalg.cho_factor(WtViW, lower=True)
    logdet_WVW = 2.0 * np.sum(np.log(np.diag(cW[0])))
    Viy = linalg.cho_solve(cV, y)
    Py = Viy - ViW @ linalg.cho_solve(cW, W.T @ Viy)
    return -0.5 * (logdet_V + logdet_WVW + float(y @ Py))


class RemlProblem:
    """Precomputed error-contrast quantities for repeated likelihood evaluation."""

    def __init__(self, W, Z_blocks, y):
        W = np.asarray(W, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        self.names = list(_as_blocks(Z_blocks))
        blocks = _as_blocks(Z_blocks)
        r = _check_W(W)
        if y.shape[0] != W.shape[0]:
            raise ValueError("y and W have different row counts")
        Qw, _ = np.linalg.qr(W, mode="complete")
        K = Qw[:, r:]
        self.n, self.r, self.m = W.shape[0], r, W.shape[0] - r
        self.z = K.T @ y
        self.zz = float(self.z @ self.z)
        self.L = np.hstack([K.T @ blocks[name] for name in self.names])
        self.col_block = np.concatenate([np.full(blocks[name].shape[1], i) for i, name in enumerate(self.names)])
        self.G = self.L.T @ self.L
        self.Lz = self.L.T @ self.z
        self.half_logdet_WtW = 0.5 * np.linalg.slogdet(W.T @ W)[1]
        self.n_evals = 0

    @classmethod
    def from_bundle(cls, bundle: DesignBundle, y) -> "RemlProblem":
        return cls(bundle.W, bundle.Z_blocks, y)

    def _vec(self, values: Mapping[str, float] | Sequence[float]) -> np.ndarray:
        if isinstance(values, Mapping):
            return np.array([float(values.get(name, 0.0)) for name in self.names])
        return np.asarray(values, dtype=float)

    def profiled_ratio(self, gammas) -> tuple[float, float]:
        """RL maximized over ``sigma_e^2`` with ``sigma_b^2 = gamma_b * sigma_e^2``.

        Returns ``(value, sigma2_e_hat)``; the inner maximum is closed form.
        """
        self.n_evals += 1
        g = self._vec(gammas)
        s = np.sqrt(g[self.col_block])
        C = np.eye(s.shape[0]) + s[:, None] * self.G * s[None, :]
        cf = linalg.cho_factor(C, lower=True)
        logdet_H = 2.0 * np.sum(np.log(np.diag(cf[0])))
        u = linalg.cho_solve(cf, s * self.Lz)
        resid = self.z - self.L @ (s * u)
        quad = float(resid @ resid + u @ u)
        if not quad > 0:
            raise ValueError("data have no variation left after removing the fixed effects")
        sigma2_e = quad / self.m
        value = -0.5 * (self.m * math.log(sigma2_e) + logdet_H + self.m) - self.half_logdet_WtW
        return value, sigma2_e

    def _spectrum(self, sigma2_re) -> tuple[np.ndarray, np.ndarray]:
        v = self._vec(sigma2_re)
        LS = self.L * np.sqrt(v[self.col_block])[None, :]
        d, U = np.linalg.eigh(LS @ LS.T)
        return np.clip(d, 0.0, None), (U.T @ self.z) ** 2

    @staticmethod
    def _objective(s, d, z2):
        return np.sum(np.log(s + d) + z2 / (s + d), axis=-1)

    def loglik(self, vc: VarianceComponents) -> float:
        d, z2 = self._spectrum(vc.sigma2_re)
        return -0.5 * float(self._objective(vc.sigma2_e, d, z2)) - self.half_logdet_WtW

    def profiled_abs(self, sigma2_re) -> tuple[float, float]:
        """RL maximized over ``sigma_e^2`` with the random-effect variances held fixed.

        The inner maximum lies in ``(0, max_i z_i^2]`` in the eigenbasis of
        ``K' B K``; it is bracketed on a log grid and polished with Brent's method.
        """
        self.n_evals += 1
        d, z2 = self._spectrum(sigma2_re)
        hi = float(z2.max())
        if not hi > 0:
            raise ValueError("data have no variation left after removing the fixed effects")
        t = np.linspace(math.log(hi) - 40.0, math.log(hi), 81)
        f = self._objective(np.exp(t)[:, None], d[None, :], z2[None, :])
        k = int(np.argmin(f))
        lo_t, hi_t = t[max(k - 1, 0)], t[min(k + 1, t.size - 1)]
        res = optimize.minimize_scalar(
            lambda x: self._objective(math.exp(x), d, z2),
            bounds=(lo_t, hi_t),
            method="bounded",
            options={"xatol": 1e-12},
        )
        best_t, best_f = (res.x, res.fun) if res.fun <= f[k] else (t[k], f[k])
        return -0.5 * float(best_f) - self.half_logdet_WtW, math.exp(best_t)


def profiled_rl(sigma2_p: float, sigma2_c: float, design: DesignBundle, y) -> float:
    """Profiled RL of a two-random-effect design at ``(sigma_1^2, sigma_2^2)``.

    The two variances refer to the design's random blocks in order (period
    then cohort for the fixed-age model).
    """
    if len(design.re_names) != 2:
        raise ValueError("profiled_rl needs a design with exactly two random blocks")
    problem = RemlProblem.from_bundle(design, y)
    return problem.profiled_abs(dict(zip(design.re_names, (sigma2_p, sigma2_c))))[0]


# --- maximization ----------------------------------------------------------


@dataclass(frozen=True)
class LocalMaximum:
    variance: VarianceComponents
    gammas: dict[str, float]
    value: float
    start: int
    n_evals: int
    converged: bool

    def as_dict(self) -> dict:
        return {
            **self.variance.as_dict(),
            "rl": self.value,
            "start": self.start,
            "n_evals": self.n_evals,
            "converged": self.converged,
        }


def _neighbours(x: float, h: float):
    if x == 0.0:
        return (GAMMA_FLOOR,)
    up = min(x * math.exp(h), GAMMA_CEIL)
    down = x * math.exp(-h)
    return (up, down if down >= GAMMA_FLOOR else 0.0)


def coordinate_ascent(fun, x0, max_evals: int = MAX_EVALS, min_step: float = MIN_LOG_STEP):
    """Derivative-free ascent on ``log(gamma)`` per coordinate with a zero arm.

    A coordinate below ``GAMMA_FLOOR`` sits exactly on the boundary; from the
    boundary the only move tried is to ``GAMMA_FLOOR``.  Steps double after a
    success and halve after a failure; the search stops when every log-step is
    below ``min_step`` (converged) or the evaluation cap is hit.
    """
    x = np.array(x0, dtype=float)
    x[x < GAMMA_FLOOR] = 0.0
    x = np.minimum(x, GAMMA_CEIL)
    fx = fun(x)
    evals = 1
    step = np.ones_like(x)
    converged = False
    while evals < max_evals:
        for b in range(x.size):
            improved = False
            for cand in _neighbours(x[b], step[b]):
                if cand == x[b]:
                    continue
                xt = x.copy()
                xt[b] = cand
                ft = fun(xt)
                evals += 1
                if ft > fx + 1e-13 * max(1.0, abs(fx)):
                    x, fx, improved = xt, ft, True
                    break
            step[b] = min(2.0 * step[b], MAX_LOG_STEP) if improved else 0.5 * step[b]
        if np.all(step < min_step):
            converged = True
            break
    return x, fx, evals, converged


def default_starts(names: Sequence[str], scales=(1e-4, 1.0)) -> list[VarianceComponents]:
    """All ones, plus each random block alone at every scale with the others at zero."""
    starts = [VarianceComponents(1.0, {n: 1.0 for n in names})]
    for name in names:
        for s in scales:
            vc = VarianceComponents(1.0, {n: (s if n == name else 0.0) for n in names})
            if vc not in starts:
                starts.append(vc)
    return starts


def _same_maximum(m1: LocalMaximum, m2: LocalMaximum, rtol: float = DEDUP_RTOL) -> bool:
    g1 = np.array(list(m1.gammas.values()))
    g2 = np.array(list(m2.gammas.values()))
    if not np.array_equal(g1 == 0, g2 == 0):
        return False
    nz = g1 > 0
    rel = np.abs(g1[nz] - g2[nz]) / np.maximum(g1[nz], g2[nz])
    if np.all(rel <= rtol):
        return True
    # flat ridges: identical heights with nearby coordinates are one maximum
    close_value = abs(m1.value - m2.value) <= 1e-7 * max(1.0, abs(m1.value))
    return close_value and bool(np.all(rel <= 0.1))


def distinct_maxima(maxima: Sequence[LocalMaximum]) -> list[LocalMaximum]:
    """Deduplicate and sort by descending RL value, then by coordinates."""
    ordered = sorted(maxima, key=lambda m: (-m.value, tuple(m.gammas.values()), m.start))
    out: list[LocalMaximum] = []
    for m in ordered:
        if not any(_same_maximum(m, o) for o in out):
            out.append(m)
    return out


def ascend_from(problem: RemlProblem, start: VarianceComponents, index: int = 0) -> LocalMaximum:
    g0 = np.array([start.sigma2_re.get(n, 0.0) / start.sigma2_e for n in problem.names])
    x, fx, evals, converged = coordinate_ascent(lambda g: problem.profiled_ratio(g)[0], g0)
    value, sigma2_e = problem.profiled_ratio(x)
    gammas = dict(zip(problem.names, (float(v) for v in x)))
    vc = VarianceComponents(sigma2_e, {n: g * sigma2_e for n, g in gammas.items()})
    return LocalMaximum(vc, gammas, value, index, evals, converged)


def reml_multistart(problem: RemlProblem, starts: Sequence[VarianceComponents]) -> list[LocalMaximum]:
    """One local maximum per start, in start order."""
    if not starts:
        raise ValueError("at least one start is required")
    return [ascend_from(problem, s, i) for i, s in enumerate(starts)]


def maximize_reml(design: DesignBundle, y, starts: Sequence[VarianceComponents] | None = None):
    """Best variance components over all starts, plus every distinct maximum found."""
    problem = RemlProblem.from_bundle(design, y)
    if starts is None:
        starts = default_starts(problem.names)
    per_start = reml_multistart(problem, starts)
    maxima = distinct_maxima(per_start)
    return maxima[0].variance, maxima


@dataclass
class FittedModel:
    variance: VarianceComponents
    effects: EffectEstimate
    rl: float
    convergence: dict = field(default_factory=dict)

    @property
    def multiple_maxima(self) -> bool:
        return bool(self.convergence.get("multiple_maxima", False))


def fit_from_variance(design: DesignBundle, y, vc: VarianceComponents) -> EffectEstimate:
    """Step 2: penalized solve with ``lambda_b = sigma_e^2 / sigma_b^2``.

    Variance ratios near the search ceiling give penalties so small that the
    normal matrix is rejected as singular; the augmented least-squares solve
    is used then, and the estimate's ``solver`` says so.
    """
    penalty = PenaltySpec(vc.ratios())
    try:
        return fit_penalized(design, penalty, y)
    except SingularSystemError:
        return fit_penalized(design, penalty, y, augmented=True)


def convergence_record(starts, per_start: Sequence[LocalMaximum]) -> dict:
    maxima = distinct_maxima(per_start)
    return {
        "starts": [s.as_dict() for s in starts],
        "per_start": [m.as_dict() for m in per_start],
        "distinct_maxima": [m.as_dict() for m in maxima],
        "multiple_maxima": len(maxima) > 1,
        "all_converged": all(m.converged for m in per_start),
    }


def fit_re_apc(design: DesignBundle, y, starts: Sequence[VarianceComponents] | None = None) -> FittedModel:
    """Two-step fit: REML variances (best over starts), then the penalized solve."""
    if not design.re_names:
        raise ValueError("design has no random effects")
    problem = RemlProblem.from_bundle(design, y)
    if problem.zz <= DEGENERATE_RTOL * float(np.dot(y, y)):
        # y lies in col(W): the RL is unbounded as sigma_e^2 -> 0 and any positive
        # penalty leaves the random blocks at zero
        vc = VarianceComponents(np.finfo(float).tiny, {n: 0.0 for n in problem.names})
        record = {"degenerate": "data lie in the fixed-effect column space", "multiple_maxima": False}
        return FittedModel(vc, fit_from_variance(design, y, vc), math.inf, record)
    if starts is None:
        starts = default_starts(problem.names)
    per_start = reml_multistart(problem, starts)
    best = distinct_maxima(per_start)[0]
    effects = fit_from_variance(design, y, best.variance)
    record = convergence_record(starts, per_start)
    record["step2_solver"] = effects.solver
    return FittedModel(best.variance, effects, best.value, record)


# --- surface ----------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Axis layout: zero plus ``n_points`` log-spaced values per variance.

    Positive values span ``scale * 10**low .. scale * 10**high`` where
    ``scale`` is the residual variance after removing the fixed effects
    unless given explicitly.
    """

    n_points: int = 30
    low: float = -8.0
    high: float = 2.0
    scale: float | None = None

    def axis(self, scale: float) -> np.ndarray:
        s = self.scale if self.scale is not None else scale
        return np.concatenate([[0.0], s * np.logspace(self.low, self.high, self.n_points)])


@dataclass
class RLSurface:
    names: list[str]
    axes: list[np.ndarray]
    values: np.ndarray
    sigma2_e: np.ndarray
    local_maxima: list[dict]

    def grid_maxima(self) -> list[tuple[int, int]]:
        return [tuple(m["seed"]) for m in self.local_maxima]


def _grid_neighbours(i, j, shape):
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if (di or dj) and 0 <= i + di < shape[0] and 0 <= j + dj < shape[1]:
                yield i + di, j + dj


def scan_rl_surface(design: DesignBundle, y, grid_spec: GridSpec | None = None) -> RLSurface:
    """Evaluate the profiled RL on a grid and catalog its local maxima.

    Every grid point hill-climbs to a grid-local maximum (steepest of its 8
    neighbours); each such seed is refined by ``coordinate_ascent`` and the
    refined maxima are deduplicated.
    """
    if len(design.re_names) != 2:
        raise ValueError("surface scans need exactly two random blocks")
    grid_spec = grid_spec or GridSpec()
    problem = RemlProblem.from_bundle(design, y)
    names = problem.names
    scale = problem.zz / problem.m
    axes = [grid_spec.axis(scale), grid_spec.axis(scale)]
    shape = (axes[0].size, axes[1].size)
    values = np.empty(shape)
    sig_e = np.empty(shape)
    for i, s1 in enumerate(axes[0]):
        for j, s2 in enumerate(axes[1]):
            values[i, j], sig_e[i, j] = problem.profiled_abs({names[0]: s1, names[1]: s2})

    seeds = set()
    for i in range(shape[0]):
        for j in range(shape[1]):
            ci, cj = i, j
            while True:
                best = max(_grid_neighbours(ci, cj, shape), key=lambda ij: values[ij])
                if values[best] <= values[ci, cj]:
                    break
                ci, cj = best
            seeds.add((ci, cj))

    refined = []
    seed_of = {}
    for idx, (i, j) in enumerate(sorted(seeds)):
        start = VarianceComponents(sig_e[i, j], {names[0]: axes[0][i], names[1]: axes[1][j]})
        m = ascend_from(problem, start, idx)
        refined.append(m)
        seed_of[idx] = (i, j)
    maxima = []
    for m in distinct_maxima(refined):
        maxima.append(
            {
                f"sigma2_{names[0]}": m.variance.sigma2_re[names[0]],
                f"sigma2_{names[1]}": m.variance.sigma2_re[names[1]],
                "sigma2_e": m.variance.sigma2_e,
                "rl": m.value,
                "seed": list(seed_of[m.start]),
                "converged": m.converged,
            }
        )
    return RLSurface(names, axes, values, sig_e, maxima)
