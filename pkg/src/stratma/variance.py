"""Exact and plug-in variances of the stratified model-assisted estimator.

The ``arm_*`` kernels work on one arm at a time and accept leading batch
axes (used by the simulation to process many replications at once). Their
shared arguments are

``codes``   zero-based stratum codes of the arm's units, shape (..., M)
``mask``    coded-unit indicator, shape (..., M)
``sizes``   N_k per stratum, shape (..., K)
``quotas``  n_k per stratum, shape (..., K)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .allocation import Allocation
from .core import Mode, PopulationTable, StrataAssignment
from .errors import AllocationInfeasible, CodedUnitMissingY, StratumTooSmall, StratumTooSmallForVariance
from .sampling import SampleDraw

FINITE_POPULATION = "finite_population"
SUPERPOPULATION = "superpopulation"


def stratum_sums(values: np.ndarray, codes: np.ndarray, mask: np.ndarray | None, K: int) -> np.ndarray:
    """Per-stratum sums of ``values`` over masked units, shape (..., K)."""
    values = np.asarray(values, dtype=float)
    onehot = np.asarray(codes)[..., None] == np.arange(K)
    if mask is not None:
        onehot = onehot & np.asarray(mask, dtype=bool)[..., None]
    return np.einsum("...m,...mk->...k", values, onehot.astype(float))


def stratum_moments(values, codes, mask, K):
    """Counts, means and (count - 1)-divisor variances per stratum.

    Variances are centred on the stratum mean before squaring, which keeps
    them accurate when residuals share a large common offset.
    """
    values = np.asarray(values, dtype=float)
    counts = stratum_sums(np.ones_like(values), codes, mask, K)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = stratum_sums(values, codes, mask, K) / counts
        centred = values - np.take_along_axis(means, np.asarray(codes), axis=-1) if means.ndim > 1 else values - means[codes]
        centred = np.where(np.isfinite(centred), centred, 0.0)
        ss = stratum_sums(centred**2, codes, mask, K)
        var = ss / (counts - 1)
    return counts, means, var


def _ratio(num, den) -> np.ndarray:
    """num / den with 0 wherever den is 0 (empty strata carry no weight)."""
    num, den = np.broadcast_arrays(np.asarray(num, dtype=float), np.asarray(den, dtype=float))
    return np.divide(num, den, out=np.zeros(num.shape), where=den != 0)


def _fpc_weights(sizes: np.ndarray, quotas: np.ndarray) -> np.ndarray:
    """N_k (N_k - n_k) / (N^2 n_k) for each stratum."""
    sizes = np.asarray(sizes, dtype=float)
    quotas = np.asarray(quotas, dtype=float)
    m = sizes.sum(axis=-1, keepdims=True)
    return sizes * (sizes - quotas) / (m**2 * quotas)


def arm_estimate(y_hat, resid, codes, mask, sizes, quotas) -> np.ndarray:
    """Mean surrogate plus the stratum-weighted mean coded residual."""
    sizes = np.asarray(sizes, dtype=float)
    quotas = np.asarray(quotas, dtype=float)
    K = sizes.shape[-1]
    m = sizes.sum(axis=-1)
    resid = np.where(mask, resid, 0.0)
    correction = _ratio(stratum_sums(resid, codes, mask, K) * sizes, quotas).sum(axis=-1) / m
    return np.mean(y_hat, axis=-1) + correction


def _masked_fpc_term(weights: np.ndarray, var: np.ndarray, full: np.ndarray) -> np.ndarray:
    # Fully coded strata contribute nothing even when their variance is undefined.
    with np.errstate(invalid="ignore"):
        return np.where(full, 0.0, weights * var).sum(axis=-1)


def arm_exact_term(resid, codes, sizes, quotas) -> np.ndarray:
    """Conditional sampling variance with population stratum variances."""
    sizes = np.asarray(sizes)
    _, _, var = stratum_moments(resid, codes, None, sizes.shape[-1])
    return _masked_fpc_term(_fpc_weights(sizes, quotas), var, np.asarray(quotas) >= sizes)


def arm_within_term(resid, codes, mask, sizes, quotas) -> np.ndarray:
    """Plug-in version of :func:`arm_exact_term` from the coded units.

    NaN when a partially coded stratum has a single coded unit.
    """
    sizes = np.asarray(sizes)
    resid = np.where(mask, resid, 0.0)
    _, _, var = stratum_moments(resid, codes, mask, sizes.shape[-1])
    return _masked_fpc_term(_fpc_weights(sizes, quotas), var, np.asarray(quotas) >= sizes)


def arm_s2_hat(y, codes, mask, sizes, quotas) -> np.ndarray:
    """Estimated population variance of the gold outcome from a stratified sample."""
    sizes = np.asarray(sizes, dtype=float)
    quotas = np.asarray(quotas, dtype=float)
    K = sizes.shape[-1]
    m = sizes.sum(axis=-1)
    y = np.where(mask, y, 0.0)
    share = sizes / m[..., None]
    _, means, s2 = stratum_moments(y, codes, mask, K)
    mean_sq = _ratio(share * stratum_sums(y**2, codes, mask, K), quotas).sum(axis=-1)
    ybar = np.where(sizes > 0, share * means, 0.0).sum(axis=-1)
    full = quotas >= sizes
    with np.errstate(invalid="ignore"):
        corr = np.where(full, 0.0, share**2 * (sizes - quotas) / sizes * s2 / quotas).sum(axis=-1)
    return m / (m - 1) * (mean_sq - ybar**2 + corr)


def arm_bs_ws(resid, codes, sizes, quotas) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-stratum BS and WS contributions and the WS weights for one arm.

    The SRS comparator codes the same total n = sum of quotas.
    """
    sizes = np.asarray(sizes, dtype=float)
    quotas = np.asarray(quotas, dtype=float)
    K = sizes.shape[-1]
    m = sizes.sum(axis=-1, keepdims=True)
    n = quotas.sum(axis=-1, keepdims=True)
    _, means, var = stratum_moments(resid, codes, None, K)
    grand = np.mean(resid, axis=-1, keepdims=True)
    bs = (m - n) / m * sizes / (n * (m - 1)) * (means - grand) ** 2
    w = sizes * (sizes - quotas) / (m**2 * quotas) - (sizes - 1) * (m - n) / (m * (m - 1) * n)
    var = np.where(sizes > 1, var, 0.0)
    return bs, w * var, w, var


# ---------------------------------------------------------------------------
# Table-level API


def _arm_inputs(strata: StrataAssignment, alloc: Allocation, z: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    sizes = strata.sizes(z)
    if z not in alloc.n or len(alloc.n[z]) != len(sizes):
        raise AllocationInfeasible(f"allocation does not cover the {len(sizes)} strata of arm {z}")
    quotas = alloc.quotas(z)
    for k, (big_n, n) in enumerate(zip(sizes, quotas), start=1):
        if big_n == 0:
            raise StratumTooSmall(f"arm {z} stratum {k} is empty")
        if not 1 <= n <= big_n:
            raise AllocationInfeasible(f"arm {z} stratum {k}: quota {n} outside [1, {big_n}]")
    return strata.codes(z), sizes, quotas


def _as_array(residuals, strata: StrataAssignment, pop: PopulationTable | None) -> np.ndarray:
    if isinstance(residuals, Mapping):
        if pop is None:
            raise ValueError("a population is needed to align residuals given by id")
        return np.array([residuals[u] for u in pop.ids.tolist()], dtype=float)
    r = np.asarray(residuals, dtype=float)
    if r.shape != (len(strata),):
        raise ValueError("need one residual per unit")
    return r


def exact_conditional_variance(residuals, strata: StrataAssignment, alloc: Allocation, pop: PopulationTable | None = None) -> float:
    """Sampling variance of the stratified estimator for a fixed assignment.

    ``residuals`` holds e_i for every unit (array aligned with ``strata`` or a
    mapping from id when ``pop`` is given). Stratum variances use N_k - 1.
    """
    r = _as_array(residuals, strata, pop)
    total = 0.0
    for z in strata.n_strata:
        codes, sizes, quotas = _arm_inputs(strata, alloc, z)
        total += float(arm_exact_term(r[strata.arm == z], codes, sizes, quotas))
    return total


@dataclass(frozen=True)
class StratumStats:
    arm: int
    stratum: int
    N: int
    n: int
    mean_residual: float
    var_residual: float


@dataclass(frozen=True)
class VarianceReport:
    total: float
    within: Mapping[int, float]
    s2_hat: Mapping[int, float]
    arm_sizes: Mapping[int, int]
    strata: tuple[StratumStats, ...] = ()
    variance_mode: str = FINITE_POPULATION
    diagnostics: tuple[str, ...] = field(default=())

    @property
    def components(self) -> dict[str, float]:
        """Named pieces that add up to ``total``."""
        out = {f"within_arm{z}": v for z, v in self.within.items()}
        if self.include_s2:
            out.update({f"s2_over_N_arm{z}": self.s2_hat[z] / self.arm_sizes[z] for z in self.s2_hat})
        return out

    @property
    def include_s2(self) -> bool:
        return len(self.within) > 1 or self.variance_mode == SUPERPOPULATION


def plugin_variance(
    pop: PopulationTable,
    strata: StrataAssignment,
    draw: SampleDraw,
    variance_mode: str = SUPERPOPULATION,
    strict: bool = True,
) -> VarianceReport:
    """Conservative plug-in variance of the stratified model-assisted estimate.

    Quotas are read off the draw. In two-arm mode the total is the sum of the
    within-strata terms and S2_hat(z)/N_z. In single-arm mode the S2_hat term
    is only added under ``variance_mode="superpopulation"``.

    A partially coded stratum with one coded unit raises
    StratumTooSmallForVariance, or with ``strict=False`` yields a NaN total
    and a diagnostic.
    """
    if variance_mode not in (FINITE_POPULATION, SUPERPOPULATION):
        raise ValueError(f"unknown variance mode {variance_mode!r}")
    within, s2, sizes_by_arm, rows, diags = {}, {}, {}, [], []
    for z in pop.arms:
        in_arm = pop.arm == z
        codes = strata.codes(z)
        sizes = strata.sizes(z)
        mask = draw.selected[in_arm]
        quotas = np.bincount(codes[mask], minlength=len(sizes))
        y = pop.y[in_arm]
        if np.any(np.isnan(y[mask])):
            raise CodedUnitMissingY(pop.ids[in_arm][mask & np.isnan(y)][0])
        for k in np.flatnonzero((quotas < 2) & (quotas < sizes)):
            if quotas[k] == 0:
                raise StratumTooSmallForVariance(f"arm {z} stratum {k + 1}: no coded units")
            msg = f"arm {z} stratum {k + 1}: one coded unit, within-stratum variance undefined"
            if strict:
                raise StratumTooSmallForVariance(msg)
            diags.append(msg)
        resid = np.where(mask, y - pop.y_hat[in_arm], 0.0)
        within[z] = float(arm_within_term(resid, codes, mask, sizes, quotas))
        s2[z] = float(arm_s2_hat(np.where(mask, y, 0.0), codes, mask, sizes, quotas))
        sizes_by_arm[z] = int(sizes.sum())
        counts, means, var = stratum_moments(resid, codes, mask, len(sizes))
        for k in range(len(sizes)):
            rows.append(StratumStats(z, k + 1, int(sizes[k]), int(quotas[k]), float(means[k]), float(var[k])))
    total = sum(within.values())
    if pop.mode is Mode.TWO_ARM or variance_mode == SUPERPOPULATION:
        total += sum(s2[z] / sizes_by_arm[z] for z in s2)
    return VarianceReport(
        total=float(total),
        within=within,
        s2_hat=s2,
        arm_sizes=sizes_by_arm,
        strata=tuple(rows),
        variance_mode=variance_mode if pop.mode is Mode.SINGLE_ARM else FINITE_POPULATION,
        diagnostics=tuple(diags),
    )


@dataclass(frozen=True)
class StratumContribution:
    arm: int
    stratum: int
    bs: float
    ws: float
    weight: float


@dataclass(frozen=True)
class Decomposition:
    bs: float
    ws: float
    per_arm: Mapping[int, tuple[float, float]]
    strata: tuple[StratumContribution, ...] = ()

    @property
    def delta(self) -> float:
        return self.bs - self.ws


def bs_ws_decomposition(residuals, strata: StrataAssignment, alloc: Allocation, pop: PopulationTable | None = None) -> Decomposition:
    """Variance gain of stratified over simple random coding, split into parts.

    ``delta = bs - ws`` is Var(MA-SRS) - Var(MA-stratified) for the given
    assignment when the SRS comparator codes the same number of units.
    """
    r = _as_array(residuals, strata, pop)
    per_arm, rows = {}, []
    for z in strata.n_strata:
        codes, sizes, quotas = _arm_inputs(strata, alloc, z)
        if sizes.sum() < 2:
            raise StratumTooSmall(f"arm {z} needs at least two units")
        bs, ws, w, _ = arm_bs_ws(r[strata.arm == z], codes, sizes, quotas)
        if len(sizes) == 1:
            # The weight algebra cancels exactly; avoid reporting rounding residue.
            bs, ws = np.zeros(1), np.zeros(1)
        per_arm[z] = (float(bs.sum()), float(ws.sum()))
        rows += [StratumContribution(z, k + 1, float(bs[k]), float(ws[k]), float(w[k])) for k in range(len(sizes))]
    return Decomposition(
        bs=sum(b for b, _ in per_arm.values()),
        ws=sum(w for _, w in per_arm.values()),
        per_arm=per_arm,
        strata=tuple(rows),
    )
