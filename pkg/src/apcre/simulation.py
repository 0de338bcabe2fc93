"""Monte Carlo study of period-effect shrinkage in the fixed-age, random
period + cohort model when the true effect is cohort-only.

Datasets are ``y = Zc* e_linear + m * Zc* e_quadratic + noise`` with ``Zc*`` the
cohort indicators rotated onto orthonormal polynomials.  Each replicate draws
from its own Philox stream keyed by ``(seed, m, replicate)``, so results do
not depend on execution order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .design import APCGrid, DesignBundle, apc_model, build_grid
from .orthopoly import reparameterize_re
from .reml import (
    FittedModel,
    RemlProblem,
    VarianceComponents,
    convergence_record,
    default_starts,
    distinct_maxima,
    fit_from_variance,
    reml_multistart,
)

POLICIES = ("default_ones", "multistart_global")


def default_m_grid() -> list[float]:
    return [round(0.05 * k, 2) for k in range(21)]


@dataclass(frozen=True)
class SimSpec:
    m_grid: tuple[float, ...] = tuple(default_m_grid())
    n_reps: int = 100
    noise_sd: float = 0.01
    seed: int = 5
    shrink_threshold: float = 1e-2
    a: int = 6
    p: int = 5

    def __post_init__(self):
        if not self.noise_sd > 0:
            raise ValueError("noise_sd must be positive")
        if self.n_reps < 1:
            raise ValueError("n_reps must be at least 1")
        if any(not 0.0 <= m <= 1.0 for m in self.m_grid):
            raise ValueError("m values must lie in [0, 1]")
        object.__setattr__(self, "m_grid", tuple(float(m) for m in self.m_grid))

    @property
    def grid(self) -> APCGrid:
        return build_grid(self.a, self.p)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["m_grid"] = list(self.m_grid)
        return d


@dataclass
class Table5Row:
    m: float
    n_reps: int
    count_period_shrunk: int
    count_cohort_shrunk: int
    mean_slope_age: float
    mean_slope_period: float
    mean_slope_cohort: float
    count_multiple_maxima: int
    count_failures: int = 0
    failures: list[str] = field(default_factory=list)


def sim_design(grid: APCGrid) -> DesignBundle:
    """Fixed age (sum-to-zero), random period and cohort (identity)."""
    return apc_model(grid, fixed=["age"], random=["period", "cohort"])


def dataset_mean(m: float, grid: APCGrid) -> np.ndarray:
    cohort = apc_model(grid, fixed=[], random=["cohort"]).Z_blocks["cohort"]
    Zs = reparameterize_re(cohort, grid.c).transformed_matrix
    return Zs[:, 1] + m * Zs[:, 2]


def _m_key(m: float) -> int:
    return int(round(m * 1_000_000))


def replicate_rng(seed: int, m: float, replicate_index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_m_key(m), int(replicate_index)))
    return np.random.Generator(np.random.Philox(ss))


def generate_dataset(m: float, replicate_index: int, spec: SimSpec) -> np.ndarray:
    grid = spec.grid
    noise = replicate_rng(spec.seed, m, replicate_index).normal(0.0, spec.noise_sd, grid.n)
    return dataset_mean(m, grid) + noise


def linear_slope(values) -> float:
    v = np.asarray(values, dtype=float)
    x = np.arange(1, v.size + 1) - 0.5 * (v.size + 1)
    return float(x @ v / (x @ x))


def classify_shrinkage(fit: FittedModel, spec: SimSpec) -> tuple[bool, bool]:
    """``(period_shrunk, cohort_shrunk)``: absolute fitted slope below the threshold."""
    out = []
    for name in ("period", "cohort"):
        if fit.variance.sigma2_re.get(name, 0.0) == 0.0:
            out.append(True)
        else:
            out.append(abs(linear_slope(fit.effects.effects[name])) < spec.shrink_threshold)
    return out[0], out[1]


def fit_replicate(y, design: DesignBundle, policy: str) -> FittedModel:
    """Fit one dataset from the full default start set.

    ``multistart_global`` keeps the best maximum over all starts;
    ``default_ones`` keeps the maximum reached from the all-ones start, as
    software with fixed default starting values would.  Either way every
    start is run so the multiple-maxima diagnostic is comparable.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    problem = RemlProblem.from_bundle(design, y)
    starts = default_starts(problem.names)
    per_start = reml_multistart(problem, starts)
    chosen = per_start[0] if policy == "default_ones" else distinct_maxima(per_start)[0]
    effects = fit_from_variance(design, y, chosen.variance)
    record = convergence_record(starts, per_start)
    record["policy"] = policy
    record["step2_solver"] = effects.solver
    return FittedModel(chosen.variance, effects, chosen.value, record)


def run_replicate(m: float, replicate_index: int, spec: SimSpec, policy: str) -> dict:
    design = sim_design(spec.grid)
    y = generate_dataset(m, replicate_index, spec)
    fit = fit_replicate(y, design, policy)
    period_shrunk, cohort_shrunk = classify_shrinkage(fit, spec)
    return {
        "m": m,
        "replicate": replicate_index,
        "period_shrunk": period_shrunk,
        "cohort_shrunk": cohort_shrunk,
        "slope_age": linear_slope(fit.effects.effects["age"]),
        "slope_period": linear_slope(fit.effects.effects["period"]),
        "slope_cohort": linear_slope(fit.effects.effects["cohort"]),
        "multiple_maxima": fit.multiple_maxima,
        "sigma2_e": fit.variance.sigma2_e,
        "sigma2_period": fit.variance.sigma2_re["period"],
        "sigma2_cohort": fit.variance.sigma2_re["cohort"],
        "rl": fit.rl,
    }


def summarize(m: float, records: list[dict], failures: list[str]) -> Table5Row:
    def mean(key):
        return float(np.mean([r[key] for r in records])) if records else math.nan

    return Table5Row(
        m=m,
        n_reps=len(records) + len(failures),
        count_period_shrunk=sum(r["period_shrunk"] for r in records),
        count_cohort_shrunk=sum(r["cohort_shrunk"] for r in records),
        mean_slope_age=mean("slope_age"),
        mean_slope_period=mean("slope_period"),
        mean_slope_cohort=mean("slope_cohort"),
        count_multiple_maxima=sum(r["multiple_maxima"] for r in records),
        count_failures=len(failures),
        failures=failures,
    )


def run_table5(spec: SimSpec, start_policy: str = "multistart_global", progress=None) -> list[Table5Row]:
    """Fit every replicate at every ``m`` and aggregate the shrinkage counts.

    A replicate whose fit raises is recorded in its row and skipped.
    """
    if start_policy not in POLICIES:
        raise ValueError(f"unknown policy {start_policy!r}; expected one of {POLICIES}")
    rows = []
    for m in spec.m_grid:
        records, failures = [], []
        for rep in range(spec.n_reps):
            try:
                records.append(run_replicate(m, rep, spec, start_policy))
            except (ValueError, np.linalg.LinAlgError) as exc:
                failures.append(f"replicate {rep}: {exc}")
        rows.append(summarize(m, records, failures))
        if progress is not None:
            progress(rows[-1])
    return rows
