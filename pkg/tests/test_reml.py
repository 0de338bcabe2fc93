import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import optimize

from apcre.design import apc_model, build_grid
from apcre.orthopoly import orthopoly_bundle
from apcre.reml import (
    GridSpec,
    RemlProblem,
    VarianceComponents,
    default_starts,
    fit_re_apc,
    maximize_reml,
    profiled_rl,
    restricted_loglik,
    scan_rl_surface,
)
from apcre.simulation import SimSpec, generate_dataset, sim_design

GRID = build_grid(6, 5)


def error_contrast_loglik(vc, W, Z_blocks, y, K):
    """Gaussian log-density of K'y for a full-column-rank K with K'W = 0,
    shifted onto the package's constant convention."""
    n, r = W.shape
    V = vc.sigma2_e * np.eye(n)
    for name, Z in Z_blocks.items():
        V += vc.sigma2_re[name] * Z @ Z.T
    S = K.T @ V @ K
    z = K.T @ y
    ll = -0.5 * (np.linalg.slogdet(S)[1] + z @ np.linalg.solve(S, z) + (n - r) * math.log(2 * math.pi))
    return ll + 0.5 * np.linalg.slogdet(K.T @ K)[1] - 0.5 * np.linalg.slogdet(W.T @ W)[1] + 0.5 * (n - r) * math.log(2 * math.pi)


@pytest.fixture
def m0_data():
    spec = SimSpec(m_grid=(0.0,), n_reps=1)
    return sim_design(spec.grid), generate_dataset(0.0, 0, spec)


def test_zero_data_term():
    b = apc_model(build_grid(4, 4), random=["cohort"])
    vc = VarianceComponents(0.7, {"cohort": 1.3})
    val = restricted_loglik(vc, b.W, b.Z_blocks, np.zeros(16))
    P = RemlProblem.from_bundle(b, np.zeros(16))
    assert P.loglik(vc) == pytest.approx(val, abs=1e-10)


def test_zero_variances_reduce_to_fixed_age_model():
    d = sim_design(GRID)
    y = np.random.default_rng(0).standard_normal(30)
    vc = VarianceComponents(0.5, {"period": 0.0, "cohort": 0.0})
    W = d.W
    n, r = W.shape
    H = W @ np.linalg.solve(W.T @ W, W.T)
    rss = y @ (np.eye(n) - H) @ y
    expected = -0.5 * (n * math.log(0.5) + np.linalg.slogdet(W.T @ W / 0.5)[1] + rss / 0.5)
    assert restricted_loglik(vc, W, d.Z_blocks, y) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_matches_error_contrast_definition(seed):
    r = np.random.default_rng(seed)
    b = apc_model(build_grid(3, 3), random=["cohort"])
    y = r.standard_normal(9)
    # arbitrary (non-orthonormal) contrast basis
    Kfull = np.linalg.svd(b.W, full_matrices=True)[0][:, b.W.shape[1] :]
    K = Kfull @ r.standard_normal((Kfull.shape[1], Kfull.shape[1]))
    vc = VarianceComponents(r.uniform(0.1, 2), {"cohort": r.uniform(0, 3)})
    oracle = error_contrast_loglik(vc, b.W, b.Z_blocks, y, K)
    assert restricted_loglik(vc, b.W, b.Z_blocks, y) == pytest.approx(oracle, abs=1e-8)
    assert RemlProblem.from_bundle(b, y).loglik(vc) == pytest.approx(oracle, abs=1e-8)


def test_invariant_to_fixed_effect_coding():
    d = sim_design(GRID)
    od = orthopoly_bundle(d)
    y = np.random.default_rng(4).standard_normal(30)
    pts = [
        VarianceComponents(1.0, {"period": 0.3, "cohort": 2.0}),
        VarianceComponents(0.2, {"period": 0.0, "cohort": 0.5}),
        VarianceComponents(3.0, {"period": 5.0, "cohort": 0.0}),
    ]
    # random blocks rotated by an orthogonal basis leave Z G Z' unchanged
    a = [restricted_loglik(v, d.W, d.Z_blocks, y) for v in pts]
    b = [restricted_loglik(v, od.W, od.Z_blocks, y) for v in pts]
    for i in range(1, 3):
        assert a[i] - a[0] == pytest.approx(b[i] - b[0], abs=1e-8)


def test_profiled_ratio_matches_direct_formula():
    d = sim_design(GRID)
    y = np.random.default_rng(5).standard_normal(30)
    P = RemlProblem.from_bundle(d, y)
    val, s2e = P.profiled_ratio({"period": 0.4, "cohort": 1.7})
    vc = VarianceComponents(s2e, {"period": 0.4 * s2e, "cohort": 1.7 * s2e})
    assert val == pytest.approx(restricted_loglik(vc, d.W, d.Z_blocks, y), abs=1e-9)


def test_profiled_rl_matches_line_search():
    d = sim_design(GRID)
    r = np.random.default_rng(6)
    y = generate_dataset(0.4, 3, SimSpec(m_grid=(0.4,), n_reps=1))
    for _ in range(50):
        sp, sc = 10.0 ** r.uniform(-6, 1, size=2)
        if r.random() < 0.2:
            sp = 0.0
        f = lambda t: -restricted_loglik(VarianceComponents(math.exp(t), {"period": sp, "cohort": sc}), d.W, d.Z_blocks, y)
        ts = np.linspace(-30, 5, 351)
        k = int(np.argmin([f(t) for t in ts]))
        res = optimize.minimize_scalar(f, bounds=(ts[max(k - 1, 0)], ts[min(k + 1, 350)]), method="bounded", options={"xatol": 1e-12})
        assert profiled_rl(sp, sc, d, y) == pytest.approx(-res.fun, abs=1e-6)


def test_profiled_rl_needs_two_blocks():
    b = apc_model(GRID, random=["cohort"])
    with pytest.raises(ValueError):
        profiled_rl(1.0, 1.0, b, np.zeros(30))


def test_variance_components_validation():
    with pytest.raises(ValueError):
        VarianceComponents(0.0, {"cohort": 1.0})
    with pytest.raises(ValueError):
        VarianceComponents(1.0, {"cohort": -1.0})
    assert VarianceComponents(2.0, {"cohort": 0.0}).ratios()["cohort"] == math.inf


def test_default_starts():
    starts = default_starts(["period", "cohort"])
    assert len(starts) == 5
    assert starts[0].sigma2_re == {"period": 1.0, "cohort": 1.0}


def test_m0_two_maxima_and_period_wins(m0_data):
    d, y = m0_data
    best, maxima = maximize_reml(d, y)
    assert len(maxima) >= 2
    top, other = maxima[0], maxima[1]
    assert top.value - other.value > 5
    assert best.sigma2_re["cohort"] < 1e-3 * best.sigma2_re["period"]
    assert other.variance.sigma2_re["period"] == 0.0


def test_m0_surface_gap_about_twenty(m0_data):
    d, y = m0_data
    surf = scan_rl_surface(d, y, GridSpec(20))
    assert len(surf.local_maxima) == 2
    rl = sorted(m["rl"] for m in surf.local_maxima)
    assert 10 < rl[1] - rl[0] < 30
    low = min(surf.local_maxima, key=lambda m: m["rl"])
    assert low["sigma2_period"] == 0.0


def test_m1_single_maximum_on_cohort_side():
    spec = SimSpec(m_grid=(1.0,), n_reps=1)
    y = generate_dataset(1.0, 0, spec)
    surf = scan_rl_surface(sim_design(spec.grid), y, GridSpec(20))
    assert len(surf.local_maxima) == 1
    # period noise can lift the maximum slightly off the axis; it stays
    # below the noise variance and negligible next to the cohort variance
    top = surf.local_maxima[0]
    assert top["sigma2_period"] < spec.noise_sd**2
    assert top["sigma2_period"] < 1e-3 * top["sigma2_cohort"]


def test_maxima_have_negative_curvature(m0_data):
    d, y = m0_data
    P = RemlProblem.from_bundle(d, y)
    _, maxima = maximize_reml(d, y)
    for m in maxima:
        g = np.array([m.gammas["period"], m.gammas["cohort"]])
        base = P.profiled_ratio(g)[0]
        for i in range(2):
            for f in (0.9, 1.1):
                h = g.copy()
                h[i] = h[i] * f if h[i] > 0 else 1e-6
                assert P.profiled_ratio(h)[0] <= base + 1e-9


def test_pure_noise_variances_mostly_small():
    d = sim_design(GRID)
    bound = 10 * 1.0 / 30
    worst = []
    for s in range(30):
        y = np.random.default_rng(s).normal(0, 1, 30)
        surf = scan_rl_surface(d, y, GridSpec(20))
        worst.append(max(max(m["sigma2_period"], m["sigma2_cohort"]) for m in surf.local_maxima))
    worst = np.array(worst)
    assert np.median(worst) < bound
    assert np.mean(worst < bound) >= 0.8


def test_recovers_generating_variances_on_average():
    b = sim_design(GRID)
    truth = {"period": 4.0, "cohort": 9.0}
    est = []
    for s in range(200):
        r = np.random.default_rng(s)
        y = sum(b.Z_blocks[k] @ r.normal(0, math.sqrt(v), b.Z_blocks[k].shape[1]) for k, v in truth.items())
        y = y + r.normal(0, 1, 30)
        best, _ = maximize_reml(b, y, [VarianceComponents(1.0, truth)])
        est.append([best.sigma2_re["period"], best.sigma2_re["cohort"], best.sigma2_e])
    mean = np.mean(est, axis=0)
    np.testing.assert_allclose(mean, [4.0, 9.0, 1.0], rtol=0.3)


def test_deterministic(m0_data):
    d, y = m0_data
    f1, f2 = fit_re_apc(d, y), fit_re_apc(d, y)
    assert f1.variance == f2.variance
    assert f1.rl == f2.rl
    np.testing.assert_array_equal(f1.effects.theta, f2.effects.theta)


def test_m0_fit_attributes_trend_to_period(m0_data):
    d, y = m0_data
    fit = fit_re_apc(d, y)
    assert abs(fit.effects.decomposition["period"].linear_slope) > 0.05
    assert np.max(np.abs(fit.effects.effects["cohort"])) < 0.02


def test_m1_fit_attributes_trend_to_cohort():
    spec = SimSpec(m_grid=(1.0,), n_reps=1)
    fit = fit_re_apc(sim_design(spec.grid), generate_dataset(1.0, 0, spec))
    q = 1 / math.sqrt(np.sum((np.arange(1, 11) - 5.5) ** 2))
    assert fit.effects.decomposition["cohort"].linear_slope == pytest.approx(q, rel=0.1)
    assert np.max(np.abs(fit.effects.effects["period"])) < spec.shrink_threshold


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_one_re_fit_has_no_cohort_level_or_slope(seed):
    b = apc_model(GRID, random=["cohort"])
    y = np.random.default_rng(seed).standard_normal(30)
    dec = fit_re_apc(b, y).effects.decomposition["cohort"]
    assert abs(dec.level) < 1e-6 and abs(dec.linear_slope) < 1e-6


def test_data_in_fixed_space_is_degenerate():
    b = apc_model(GRID, random=["cohort"])
    y = b.W @ np.arange(1.0, b.W.shape[1] + 1)
    fit = fit_re_apc(b, y)
    assert fit.rl == math.inf
    assert "degenerate" in fit.convergence
    np.testing.assert_array_equal(fit.effects.effects["cohort"], 0.0)


def test_fit_requires_random_block():
    with pytest.raises(ValueError):
        fit_re_apc(apc_model(GRID, fixed=["age", "period"], random=[]), np.ones(30))


def test_near_noise_free_data_falls_back_to_augmented_solve():
    b = apc_model(GRID, random=["age", "cohort"])
    k = GRID.index("cohort").astype(float)
    fit = fit_re_apc(b, 0.05 * (k - 5.5) ** 2)
    assert fit.convergence["step2_solver"] == "augmented"
    assert np.all(np.isfinite(fit.effects.theta))


def test_ordinary_data_uses_cholesky(m0_data):
    d, y = m0_data
    assert fit_re_apc(d, y).convergence["step2_solver"] == "cholesky"
