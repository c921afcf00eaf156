import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_table
from oracles import exact_term_arm, plugin_arm
from stratma.allocation import Allocation, proportional_allocation
from stratma.core import Mode, StrataAssignment
from stratma.errors import AllocationInfeasible, StratumTooSmallForVariance
from stratma.sampling import SampleDraw, stratified_sample
from stratma.variance import (
    FINITE_POPULATION,
    SUPERPOPULATION,
    arm_exact_term,
    arm_within_term,
    bs_ws_decomposition,
    exact_conditional_variance,
    plugin_variance,
    stratum_moments,
)


@st.composite
def arm_instance(draw):
    """One arm: strata sizes, quotas, and residuals."""
    K = draw(st.integers(1, 4))
    sizes = [draw(st.integers(2, 8)) for _ in range(K)]
    quotas = [draw(st.integers(1, s)) for s in sizes]
    labels = np.repeat(np.arange(1, K + 1), sizes)
    resid = np.array(draw(st.lists(st.floats(-50, 50), min_size=len(labels), max_size=len(labels))))
    return labels, np.array(sizes), np.array(quotas), resid


@settings(max_examples=60, deadline=None)
@given(arm_instance())
def test_exact_term_matches_loop_oracle(inst):
    labels, sizes, quotas, resid = inst
    got = arm_exact_term(resid, labels - 1, sizes, quotas)
    assert got == pytest.approx(exact_term_arm(resid.tolist(), labels.tolist(), quotas.tolist()), rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(arm_instance())
def test_between_minus_within_equals_srs_gap(inst):
    labels, sizes, quotas, resid = inst
    N, n = sizes.sum(), quotas.sum()
    arm = np.zeros(len(labels), dtype=int)
    strata = StrataAssignment(labels, arm)
    dec = bs_ws_decomposition(resid, strata, Allocation.manual({0: quotas}, {0: sizes}))
    srs = (N - n) / (N * n) * np.var(resid, ddof=1)
    strat = exact_term_arm(resid.tolist(), labels.tolist(), quotas.tolist())
    assert dec.delta == pytest.approx(srs - strat, rel=1e-7, abs=1e-7)
    assert dec.bs >= -1e-12


@settings(max_examples=40, deadline=None)
@given(arm_instance(), st.integers(0, 2**31))
def test_plugin_matches_loop_oracle(inst, seed):
    labels, sizes, quotas, resid = inst
    quotas = np.maximum(quotas, np.minimum(2, sizes))
    rng = np.random.default_rng(seed)
    y = rng.normal(0, 3, len(labels))
    y_hat = y - resid
    pop, _ = make_table(n_per_arm=len(labels), two_arm=False)
    pop = pop.replace(y_hat=y_hat, y=y, stratum=labels)
    strata = StrataAssignment(labels, pop.arm)
    draw = stratified_sample(pop, strata, Allocation.manual({0: quotas}, {0: sizes}), seed)
    rep = plugin_variance(pop, strata, draw, SUPERPOPULATION)
    sample = set(np.flatnonzero(draw.selected).tolist())
    assert rep.total == pytest.approx(plugin_arm(y_hat.tolist(), y.tolist(), labels.tolist(), sample), rel=1e-8, abs=1e-10)
    assert sum(rep.components.values()) == pytest.approx(rep.total)


def test_full_coding_gives_zero_exact_variance(table):
    pop, strata = table
    sizes = {z: strata.sizes(z) for z in pop.arms}
    alloc = Allocation.manual(sizes, sizes)
    assert exact_conditional_variance(pop.y - pop.y_hat, strata, alloc) == 0.0


def test_residuals_by_id(table):
    pop, strata = table
    alloc = proportional_allocation({z: strata.sizes(z) for z in pop.arms}, 12)
    by_id = dict(zip(pop.ids.tolist(), (pop.y - pop.y_hat).tolist()))
    assert exact_conditional_variance(by_id, strata, alloc, pop) == exact_conditional_variance(pop.y - pop.y_hat, strata, alloc)


def test_single_arm_modes():
    pop, strata = make_table(two_arm=False)
    alloc = proportional_allocation({0: strata.sizes(0)}, 12)
    draw = stratified_sample(pop, strata, alloc, 0)
    fin = plugin_variance(pop, strata, draw, FINITE_POPULATION)
    sup = plugin_variance(pop, strata, draw, SUPERPOPULATION)
    assert fin.total == pytest.approx(fin.within[0])
    assert sup.total == pytest.approx(fin.total + sup.s2_hat[0] / 40)


def test_single_coded_unit_in_stratum(table):
    pop, strata = table
    alloc = Allocation.manual({0: (1, 2, 2, 2), 1: (2, 2, 2, 2)}, {z: strata.sizes(z) for z in pop.arms})
    draw = stratified_sample(pop, strata, alloc, 0)
    with pytest.raises(StratumTooSmallForVariance):
        plugin_variance(pop, strata, draw)
    rep = plugin_variance(pop, strata, draw, strict=False)
    assert np.isnan(rep.total) and rep.diagnostics


def test_allocation_must_cover_strata(table):
    pop, strata = table
    with pytest.raises(AllocationInfeasible):
        exact_conditional_variance(pop.y - pop.y_hat, strata, Allocation.manual({0: (2, 2)}, {0: (20, 20)}))


def test_stratum_moments_ignore_uncoded():
    vals = np.array([1.0, 3.0, np.nan, 10.0, 12.0])
    codes = np.array([0, 0, 0, 1, 1])
    mask = np.array([True, True, False, True, True])
    counts, means, var = stratum_moments(np.where(mask, vals, 0.0), codes, mask, 2)
    assert counts.tolist() == [2, 2]
    assert means.tolist() == [2.0, 11.0]
    assert var.tolist() == [2.0, 2.0]


def test_batched_within_term_matches_rows():
    rng = np.random.default_rng(3)
    codes = np.repeat([0, 1, 2], 6)
    sizes, quotas = np.array([6, 6, 6]), np.array([2, 3, 4])
    masks = np.stack([np.concatenate([rng.permutation(6) < q for q in quotas]) for _ in range(5)])
    resid = rng.normal(size=(5, 18))
    batch = arm_within_term(resid, np.broadcast_to(codes, (5, 18)), masks, sizes, quotas)
    rows = [arm_within_term(resid[r], codes, masks[r], sizes, quotas) for r in range(5)]
    np.testing.assert_allclose(batch, rows)


def test_report_strata_rows(table):
    pop, strata = table
    alloc = proportional_allocation({z: strata.sizes(z) for z in pop.arms}, 16)
    draw = stratified_sample(pop, strata, alloc, 1)
    rep = plugin_variance(pop, strata, draw)
    assert len(rep.strata) == 8
    assert {(s.arm, s.stratum): s.n for s in rep.strata} == dict(draw.counts)
    assert rep.variance_mode == FINITE_POPULATION
    assert pop.mode is Mode.TWO_ARM
    assert isinstance(draw, SampleDraw)
