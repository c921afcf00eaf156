import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stratma.allocation import neyman_allocation, proportional_allocation
from stratma.core import StrataAssignment
from stratma.errors import ConfigError, InvalidR2, NonpositiveWeights
from stratma.estimators import estimate_ma_srs, estimate_ma_stratified, estimate_oracle, estimate_subset
from stratma.sampling import SampleDraw, Seed, order_sample
from stratma.simulation import (
    ESTIMATORS,
    GridConfig,
    ScenarioConfig,
    _draw_population,
    bias_pattern,
    calibrate_dgp,
    generate_corpus,
    generate_population,
    resample_repeats,
    run_grid,
    run_scenario,
    scenario_weights,
    simulate_replications,
    summarize_repeats,
    variance_pattern,
)
from stratma.variance import stratum_moments


def test_calibration_examples():
    cal = calibrate_dgp("none", "homogeneous", 0.4)
    assert cal.c == pytest.approx(5.4)
    np.testing.assert_allclose(cal.sigma2_eps, 5.4)
    assert cal.implied_r2(3.0) == pytest.approx(0.4)
    small = calibrate_dgp("small", "homogeneous", 0.4)
    np.testing.assert_allclose(small.b_prime, [-0.75, -0.24, 0.24, 0.75])
    assert small.c == pytest.approx(5.4 / 1.31005, rel=1e-12)
    het = calibrate_dgp("moderate", "heterogeneous", 0.4)
    assert het.V == pytest.approx(2.125)
    assert np.mean(het.sigma2_eps) == pytest.approx(het.c)


weights = st.lists(st.floats(0.05, 1.0), min_size=2, max_size=6).map(lambda w: np.array(w) / np.sum(w))


@settings(max_examples=80, deadline=None)
@given(weights, st.sampled_from(["none", "small", "moderate", "large", "extreme_contrast"]),
       st.sampled_from(["homogeneous", "heterogeneous", "extreme_contrast"]), st.floats(0.01, 0.99), st.floats(0.5, 5))
def test_calibration_identity(w, bias, variance, r2, sigma):
    cal = calibrate_dgp(bias, variance, r2, sigma, w)
    assert abs(np.sum(w * cal.b)) < 1e-12
    assert np.all(cal.sigma2_eps > 0)
    assert np.sum(w * cal.sigma2_eps) == pytest.approx(cal.c, rel=1e-12)
    assert np.sum(w * cal.b**2) + cal.c == pytest.approx(sigma**2 * (1 - r2), rel=1e-12)


@pytest.mark.parametrize("r2", [0.0, 1.0, -0.1])
def test_invalid_r2(r2):
    with pytest.raises(InvalidR2):
        calibrate_dgp("none", "homogeneous", r2)


def test_bad_weights():
    with pytest.raises(NonpositiveWeights):
        calibrate_dgp("none", "homogeneous", 0.4, weights=[0.5, 0.0, 0.5])


@pytest.mark.parametrize("K", [2, 3, 5])
def test_patterns_for_other_k(K):
    assert len(bias_pattern("large", K)) == K and len(variance_pattern("extreme_contrast", K)) == K
    assert bias_pattern("large", K)[0] == -1.0


def test_unbalanced_weights_fixed_per_key():
    cfg = ScenarioConfig(strata="unbalanced")
    w = scenario_weights(cfg)
    assert w.sum() == pytest.approx(1.0) and np.all(w > 0)
    assert np.array_equal(w, scenario_weights(ScenarioConfig(strata="unbalanced", h=0.5)))


def test_population_generation():
    cfg = ScenarioConfig(tau=0.0, reps=10)
    a = generate_population(cfg, replication=3)
    b = generate_population(cfg, replication=3)
    assert a.true_ate == 0.0
    assert a.table.equals(b.table)
    assert not a.table.equals(generate_population(cfg, replication=4).table)
    assert a.strata.sizes(0).tolist() == [125] * 4


def test_zero_noise_limit():
    cfg = ScenarioConfig(r2=0.999999, reps=1)
    pop = generate_population(cfg).table
    assert np.max(np.abs(pop.y - pop.y_hat)) < 0.05


def test_config_validation():
    with pytest.raises(ConfigError):
        ScenarioConfig(N=11)
    with pytest.raises(ConfigError):
        ScenarioConfig(bias="huge")
    with pytest.raises(ConfigError):
        simulate_replications(ScenarioConfig(N=20, h=0.1, reps=2))


@pytest.mark.parametrize("strata", ["balanced_exact", "unbalanced"])
def test_batched_kernels_match_table_estimators(strata):
    """One replication recomputed through the public estimators."""
    cfg = ScenarioConfig(N=200, bias="large", variance="heterogeneous", strata=strata, h=0.2, reps=3, seed=9)
    sims = simulate_replications(cfg)
    r = 2
    pi = scenario_weights(cfg)
    cal = calibrate_dgp(cfg.bias, cfg.variance, cfg.r2, cfg.sigma_y, pi)
    d = _draw_population(cfg, cal, pi, Seed(cfg.seed).rng(cfg.population_key(), r))
    pop = generate_population(cfg, replication=r)
    table, labels = pop.table, StrataAssignment(d.stratum + 1, d.arm, n_strata={0: cfg.K, 1: cfg.K})
    n = cfg.budget
    srs_mask = np.zeros(cfg.N, dtype=bool)
    prop_mask = np.zeros(cfg.N, dtype=bool)
    opt_mask = np.zeros(cfg.N, dtype=bool)
    sizes, sds = {}, {}
    for z in (0, 1):
        sl = d.arm == z
        codes = labels.codes(z)
        srs_mask[sl] = order_sample(np.zeros_like(codes), np.array([n]), d.keys[sl])
        sizes[z] = labels.sizes(z)
        _, _, var = stratum_moments(table.y[sl] - table.y_hat[sl], codes, None, cfg.K)
        sds[z] = np.sqrt(var)
    live = {z: sizes[z] > 0 for z in (0, 1)}
    prop = proportional_allocation({z: sizes[z][live[z]] for z in (0, 1)}, n, cfg.min_floor)
    opt = neyman_allocation({z: sizes[z][live[z]] for z in (0, 1)}, {z: sds[z][live[z]] for z in (0, 1)}, n, cfg.min_floor)
    for z in (0, 1):
        sl = d.arm == z
        for alloc, mask in ((prop, prop_mask), (opt, opt_mask)):
            q = np.zeros(cfg.K, dtype=int)
            q[live[z]] = alloc.n[z]
            mask[sl] = order_sample(labels.codes(z), q, d.keys[sl])
    dense = StrataAssignment.from_column(table) if strata != "balanced_exact" else labels
    srs_draw = SampleDraw.from_mask(table, srs_mask)
    reports = {
        "oracle": estimate_oracle(table),
        "subset": estimate_subset(table, srs_draw),
        "ma_srs": estimate_ma_srs(table, srs_draw),
        "ma_strat_prop": estimate_ma_stratified(table, dense, SampleDraw.from_mask(table, prop_mask, dense)),
        "ma_strat_opt": estimate_ma_stratified(table, dense, SampleDraw.from_mask(table, opt_mask, dense)),
    }
    for name in ESTIMATORS:
        assert sims[f"{name}_est"][r] == pytest.approx(reports[name].estimate, abs=1e-10), name
        assert sims[f"{name}_var"][r] == pytest.approx(reports[name].se ** 2, rel=1e-9), name


def test_chunking_does_not_change_results():
    cfg = ScenarioConfig(N=100, reps=7, h=0.2)
    a = simulate_replications(cfg, chunk=3)
    b = simulate_replications(cfg, chunk=100)
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_metrics_identities():
    res = run_scenario(ScenarioConfig(N=200, bias="moderate", reps=300, h=0.2, seed=1))
    R = 300
    for name, m in res.metrics.items():
        assert m.mse == pytest.approx(m.bias**2 + m.emp_se**2 * (R - 1) / R, rel=1e-9)
        assert abs(m.bias) <= 4 * m.emp_se / math.sqrt(R)
        assert 0 <= m.coverage <= 1
    assert res.metrics["ma_srs"].var_reduction_vs_srs == 0.0
    assert res.metrics["ma_strat_prop"].var_inflation_vs_full >= 0.9


def test_se_non_increasing_in_coding_fraction():
    ses = [run_scenario(ScenarioConfig(N=200, bias="large", variance="heterogeneous", reps=300, h=h)).metrics
           for h in (0.1, 0.3, 0.6, 0.9)]
    for name in ("subset", "ma_srs", "ma_strat_prop", "ma_strat_opt"):
        vals = [m[name].emp_se for m in ses]
        assert all(b <= a * 1.05 for a, b in zip(vals, vals[1:])), (name, vals)


def test_pilot_variant_runs():
    res = run_scenario(ScenarioConfig(N=400, variance="extreme_contrast", reps=50, h=0.3, optimal_sd="pilot"))
    assert np.isfinite(res.metrics["ma_strat_opt"].emp_se)


def test_grid():
    full = GridConfig()
    assert len(full.cells()) == 810
    one = GridConfig(bias=("large",), variance=("homogeneous",), r2=(0.4,), strata=("balanced_exact",), h=(0.2,), reps=50, N=200)
    df = run_grid(one)
    expected = run_scenario(one.cells()[0])
    assert list(df.columns[:13]) == ["N", "K", "sigma_y", "tau", "bias_pattern", "variance_pattern", "r2", "strata", "h",
                                     "reps", "seed", "estimator", "bias"]
    assert set(df["bias_pattern"]) == {"large"}
    got = df.set_index("estimator")
    for name, m in expected.metrics.items():
        assert got.loc[name, "emp_se"] == m.emp_se
    with pytest.raises(ConfigError):
        GridConfig.from_dict({"bias": ["none"], "colour": 1})
    assert GridConfig.from_dict({"bias": "none", "h": [0.1, 0.2]}).h == (0.1, 0.2)


def test_grid_threads_and_errors():
    grid = GridConfig(bias=("none", "large"), variance=("homogeneous",), r2=(0.4,), strata=("balanced_exact",),
                      h=(0.01, 0.3), reps=20, N=100)
    a = run_grid(grid, threads=1)
    b = run_grid(grid, threads=3)
    assert a.equals(b)
    bad = a[a["h"] == 0.01]
    assert (bad["error"] != "").all() and bad["emp_se"].isna().all()


def test_shared_population_across_h():
    a = generate_population(ScenarioConfig(h=0.1)).table
    b = generate_population(ScenarioConfig(h=0.7, reps=5)).table
    assert a.equals(b)


def test_corpus_structure():
    pop, strata = generate_corpus(seed=0)
    resid = pop.y - pop.y_hat
    for z in (0, 1):
        _, means, var = stratum_moments(resid[pop.arm == z], strata.codes(z), None, strata.K(z))
        assert np.all(np.diff(means) < 0) and np.all(means < 0)
        assert np.all(np.diff(var) > 0)


def test_resample_repeats_deterministic():
    pop, strata = generate_corpus(seed=2)
    a = resample_repeats(pop, strata, 300, repeats=3, seed=4)
    b = resample_repeats(pop, strata, 300, repeats=3, seed=4)
    assert a.equals(b)
    s = summarize_repeats(a)
    assert list(s["estimator"]) == list(ESTIMATORS)
    assert s.set_index("estimator").loc["oracle", "emp_var"] == 0.0
