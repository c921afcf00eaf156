import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_table
from oracles import ma_stratified_mean
from stratma.allocation import Allocation, proportional_allocation
from stratma.core import Mode, PopulationTable, StrataAssignment
from stratma.errors import EmptyArmSample, StratumDrawMismatch, UncodedUnit
from stratma.estimators import (
    estimate_ma_srs,
    estimate_ma_stratified,
    estimate_oracle,
    estimate_subset,
)
from stratma.sampling import SampleDraw, srs_sample, stratified_sample
from stratma.variance import FINITE_POPULATION


def _two_arm(y1, y0, y_hat=None):
    y = list(y0) + list(y1)
    return PopulationTable(
        ids=[f"u{i}" for i in range(len(y))], y_hat=y_hat if y_hat is not None else [0.0] * len(y),
        arm=[0] * len(y0) + [1] * len(y1), y=y, mode=Mode.TWO_ARM,
    )


def test_oracle_examples():
    assert estimate_oracle(_two_arm((2, 4), (1, 1))).estimate == 2.0
    flat = estimate_oracle(_two_arm((3, 3), (3, 3)))
    assert flat.estimate == 0.0 and flat.se == 0.0


def test_oracle_needs_full_coding():
    with pytest.raises(UncodedUnit):
        estimate_oracle(_two_arm((2, np.nan), (1, 1)))


def test_subset_example():
    pop = _two_arm((1, 3), (0, 0))
    rep = estimate_subset(pop, SampleDraw.from_mask(pop, np.ones(4, dtype=bool)))
    assert rep.estimate == 2.0 and rep.se == pytest.approx(1.0)
    assert rep.ci == pytest.approx((2 - 1.959963984540054, 2 + 1.959963984540054))


def test_single_arm_hand_examples():
    pop = PopulationTable(ids=["u1", "u2", "u3", "u4"], y_hat=[1, 2, 3, 4], y=[1.5, np.nan, 3.5, np.nan])
    draw = SampleDraw.from_mask(pop, pop.coded)
    assert estimate_ma_srs(pop, draw).estimate == pytest.approx(3.0)
    strata = StrataAssignment(np.array([1, 1, 2, 2]), pop.arm)
    alloc = Allocation.manual({0: (1, 1)}, {0: (2, 2)})
    rep = estimate_ma_stratified(pop, strata, SampleDraw.from_mask(pop, pop.coded, strata), alloc)
    assert rep.estimate == pytest.approx(3.0)
    assert rep.estimand == "mean"


def test_full_coding_reproduces_oracle(table):
    pop, strata = table
    full = SampleDraw.from_mask(pop, np.ones(len(pop), dtype=bool), strata)
    truth = estimate_oracle(pop).estimate
    assert estimate_subset(pop, full).estimate == pytest.approx(truth, abs=1e-12)
    assert estimate_ma_srs(pop, full).estimate == pytest.approx(truth, abs=1e-12)
    assert estimate_ma_stratified(pop, strata, full).estimate == pytest.approx(truth, abs=1e-12)


def test_one_stratum_equals_srs(table):
    pop, _ = table
    draw = srs_sample(pop, 10, 2)
    single = StrataAssignment.single(pop)
    a = estimate_ma_srs(pop, draw)
    b = estimate_ma_stratified(pop, single, draw)
    assert a.estimate == b.estimate and a.se == b.se


def test_perfect_predictor(table):
    pop, strata = table
    pop = pop.replace(y_hat=pop.y)
    draw = srs_sample(pop, 10, 0)
    means = [pop.y_hat[pop.arm == z].mean() for z in (0, 1)]
    assert estimate_ma_srs(pop, draw).estimate == pytest.approx(means[1] - means[0])


def test_allocation_mismatch(table):
    pop, strata = table
    alloc = proportional_allocation({z: strata.sizes(z) for z in pop.arms}, 12)
    draw = stratified_sample(pop, strata, alloc, 0)
    other = proportional_allocation({z: strata.sizes(z) for z in pop.arms}, 16)
    with pytest.raises(StratumDrawMismatch):
        estimate_ma_stratified(pop, strata, draw, other)


def test_empty_arm_and_uncoded_draw(table):
    pop, strata = table
    mask = np.zeros(len(pop), dtype=bool)
    mask[:5] = True
    with pytest.raises(EmptyArmSample):
        estimate_ma_srs(pop, SampleDraw.from_mask(pop, mask))
    partial, _ = make_table(coded_fraction=0.5)
    with pytest.raises(UncodedUnit):
        estimate_subset(partial, SampleDraw.from_mask(partial, np.ones(len(partial), dtype=bool)))


def test_singleton_coded_stratum_reports_nan_se(table):
    pop, strata = table
    alloc = Allocation.manual({0: (1, 2, 2, 2), 1: (2, 2, 2, 2)}, {z: strata.sizes(z) for z in pop.arms})
    rep = estimate_ma_stratified(pop, strata, stratified_sample(pop, strata, alloc, 0), alloc)
    assert np.isfinite(rep.estimate) and np.isnan(rep.se) and rep.diagnostics


def test_report_serialization(table):
    pop, strata = table
    alloc = proportional_allocation({z: strata.sizes(z) for z in pop.arms}, 12)
    rep = estimate_ma_stratified(pop, strata, stratified_sample(pop, strata, alloc, 0), alloc, level=0.9)
    d = rep.to_dict()
    assert d["method"] == "ma_stratified" and len(d["strata"]) == 8 and d["level"] == 0.9
    row = rep.flat_row()
    assert row["ci_lo"] < row["estimate"] < row["ci_hi"]
    assert sum(rep.components.values()) == pytest.approx(rep.se**2)


def test_single_arm_variance_modes():
    pop, strata = make_table(two_arm=False)
    assert estimate_oracle(pop, variance_mode=FINITE_POPULATION).se == 0.0
    assert estimate_oracle(pop).se > 0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 10), st.floats(-10, 10), st.integers(0, 1000))
def test_affine_equivariance(a, b, seed):
    pop, strata = make_table(n_per_arm=24, K=3)
    alloc = proportional_allocation({z: strata.sizes(z) for z in pop.arms}, 9)
    draw = stratified_sample(pop, strata, alloc, seed)
    moved = pop.replace(y=a * pop.y + b, y_hat=a * pop.y_hat + b)
    base = estimate_ma_stratified(pop, strata, draw, alloc)
    new = estimate_ma_stratified(moved, strata, draw, alloc)
    assert new.estimate == pytest.approx(a * base.estimate, rel=1e-9, abs=1e-9)
    assert new.se == pytest.approx(a * base.se, rel=1e-9)
    single, st1 = make_table(n_per_arm=24, K=3, two_arm=False)
    d1 = stratified_sample(single, st1, proportional_allocation({0: st1.sizes(0)}, 9), seed)
    m0 = estimate_ma_stratified(single, st1, d1).estimate
    m1 = estimate_ma_stratified(single.replace(y=a * single.y + b, y_hat=a * single.y_hat + b), st1, d1).estimate
    assert m1 == pytest.approx(a * m0 + b, rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_stratified_matches_loop_oracle(seed):
    pop, strata = make_table(n_per_arm=20, K=3, seed=seed % 7)
    alloc = proportional_allocation({z: strata.sizes(z) for z in pop.arms}, 8)
    draw = stratified_sample(pop, strata, alloc, seed)
    per_arm = []
    for z in (0, 1):
        idx = np.flatnonzero(pop.arm == z)
        local = {j for j, i in enumerate(idx) if draw.selected[i]}
        per_arm.append(ma_stratified_mean(pop.y_hat[idx].tolist(), pop.y[idx].tolist(), strata.labels[idx].tolist(), local))
    assert estimate_ma_stratified(pop, strata, draw, alloc).estimate == pytest.approx(per_arm[1] - per_arm[0], abs=1e-12)


def test_subset_unbiased_by_enumeration():
    from stratma.simulation import TinyPopulation, exhaustive_oracle

    rng = np.random.default_rng(1)
    y0 = rng.normal(0, 1, 6).round(2)
    tiny = TinyPopulation(y0, y0 + rng.normal(1, 1, 6).round(2), y0 + 0.3, y0 - 0.2, 3)
    o = exhaustive_oracle(tiny, {0: (1, 1), 1: (1, 1)})
    assert o.means["subset"] == pytest.approx(o.true_ate, abs=1e-12)
    assert o.means["ma_srs"] == pytest.approx(o.true_ate, abs=1e-12)
