"""Point estimators: full coding, coded subset, and the model-assisted pair."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from statistics import NormalDist
from typing import Any, Mapping

import numpy as np

from .allocation import Allocation
from .core import Mode, PopulationTable, StrataAssignment
from .errors import EmptyArmSample, StratumDrawMismatch, UncodedUnit
from .sampling import SampleDraw
from .variance import SUPERPOPULATION, StratumStats, VarianceReport, arm_estimate, plugin_variance

ORACLE = "oracle"
SUBSET = "subset"
MA_SRS = "ma_srs"
MA_STRATIFIED = "ma_stratified"


@dataclass(frozen=True)
class EstimateReport:
    estimand: str
    method: str
    estimate: float
    se: float
    ci: tuple[float, float]
    level: float = 0.95
    components: Mapping[str, float] = field(default_factory=dict)
    strata: tuple[StratumStats, ...] = ()
    diagnostics: tuple[str, ...] = ()
    n_coded: int = 0

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["ci"] = list(self.ci)
        d["components"] = dict(self.components)
        d["strata"] = [asdict(s) for s in self.strata]
        d["diagnostics"] = list(self.diagnostics)
        return d

    def flat_row(self) -> dict[str, Any]:
        row = {
            "estimand": self.estimand,
            "method": self.method,
            "estimate": self.estimate,
            "se": self.se,
            "ci_lo": self.ci[0],
            "ci_hi": self.ci[1],
            "level": self.level,
            "n_coded": self.n_coded,
        }
        row.update(self.components)
        return row


def _resolve_estimand(pop: PopulationTable, estimand: str | None) -> str:
    default = "ate" if pop.mode is Mode.TWO_ARM else "mean"
    estimand = estimand or default
    if estimand != default:
        raise ValueError(f"estimand {estimand!r} is not available for a {pop.mode.value} table")
    return estimand


def _report(estimand, method, est, var, level, **kw) -> EstimateReport:
    se = math.sqrt(var) if var >= 0 else math.nan
    half = NormalDist().inv_cdf(0.5 + level / 2) * se
    return EstimateReport(estimand, method, float(est), se, (float(est - half), float(est + half)), level, **kw)


def _combine(pop: PopulationTable, per_arm: Mapping[int, float]) -> float:
    return per_arm[1] - per_arm[0] if pop.mode is Mode.TWO_ARM else per_arm[0]


def _coded_in_draw(pop: PopulationTable, draw: SampleDraw) -> np.ndarray:
    mask = np.asarray(draw.selected, dtype=bool)
    if mask.shape != (len(pop),):
        raise ValueError("draw does not match the population")
    missing = mask & np.isnan(pop.y)
    if missing.any():
        raise UncodedUnit(f"sampled units without a gold outcome: {pop.ids[missing][:5].tolist()}")
    for z in pop.arms:
        if not np.any(mask & (pop.arm == z)):
            raise EmptyArmSample(f"no coded units in arm {z}")
    return mask


def estimate_oracle(
    pop: PopulationTable, estimand: str | None = None, level: float = 0.95, variance_mode: str = SUPERPOPULATION
) -> EstimateReport:
    """Difference in arm means (or the mean) with every unit coded."""
    estimand = _resolve_estimand(pop, estimand)
    if not pop.coded.all():
        raise UncodedUnit(f"{int((~pop.coded).sum())} units lack a gold outcome")
    means, var = {}, 0.0
    for z in pop.arms:
        y = pop.y[pop.arm == z]
        means[z] = float(np.mean(y))
        s2 = float(np.var(y, ddof=1)) if len(y) > 1 else 0.0
        if pop.mode is Mode.TWO_ARM or variance_mode == SUPERPOPULATION:
            var += s2 / len(y)
    return _report(estimand, ORACLE, _combine(pop, means), var, level, components={"sampling": var}, n_coded=len(pop))


def estimate_subset(pop: PopulationTable, draw: SampleDraw, estimand: str | None = None, level: float = 0.95) -> EstimateReport:
    """Difference in coded-sample arm means, ignoring the surrogates.

    The SE is the usual two-sample formula without a finite population
    correction.
    """
    estimand = _resolve_estimand(pop, estimand)
    mask = _coded_in_draw(pop, draw)
    means, comps, diags = {}, {}, []
    for z in pop.arms:
        y = pop.y[mask & (pop.arm == z)]
        means[z] = float(np.mean(y))
        if len(y) < 2:
            diags.append(f"arm {z}: one coded unit, variance undefined")
            comps[f"arm{z}"] = math.nan
        else:
            comps[f"arm{z}"] = float(np.var(y, ddof=1)) / len(y)
    return _report(
        estimand, SUBSET, _combine(pop, means), sum(comps.values()), level,
        components=comps, diagnostics=tuple(diags), n_coded=int(mask.sum()),
    )


def _model_assisted(
    pop: PopulationTable, strata: StrataAssignment, draw: SampleDraw, method: str,
    estimand: str | None, level: float, variance_mode: str,
) -> EstimateReport:
    estimand = _resolve_estimand(pop, estimand)
    mask = _coded_in_draw(pop, draw)
    per_arm = {}
    for z in pop.arms:
        in_arm = pop.arm == z
        codes = strata.codes(z)
        sizes = strata.sizes(z)
        m = mask[in_arm]
        quotas = np.bincount(codes[m], minlength=len(sizes))
        if np.any(quotas == 0):
            k = int(np.flatnonzero(quotas == 0)[0]) + 1
            raise StratumDrawMismatch(f"arm {z} stratum {k} has no coded units")
        resid = np.where(m, pop.y[in_arm] - pop.y_hat[in_arm], 0.0)
        per_arm[z] = float(arm_estimate(pop.y_hat[in_arm], resid, codes, m, sizes, quotas))
    vr: VarianceReport = plugin_variance(pop, strata, draw, variance_mode=variance_mode, strict=False)
    return _report(
        estimand, method, _combine(pop, per_arm), vr.total, level,
        components=vr.components, strata=vr.strata, diagnostics=vr.diagnostics, n_coded=int(mask.sum()),
    )


def estimate_ma_srs(
    pop: PopulationTable, draw: SampleDraw, estimand: str | None = None, level: float = 0.95,
    variance_mode: str = SUPERPOPULATION,
) -> EstimateReport:
    """Mean surrogate plus mean coded residual, per arm."""
    return _model_assisted(pop, StrataAssignment.single(pop), draw, MA_SRS, estimand, level, variance_mode)


def estimate_ma_stratified(
    pop: PopulationTable, strata: StrataAssignment, draw: SampleDraw, alloc: Allocation | None = None,
    estimand: str | None = None, level: float = 0.95, variance_mode: str = SUPERPOPULATION,
) -> EstimateReport:
    """Mean surrogate plus stratum-weighted coded residuals, per arm.

    When ``alloc`` is given the draw's realized stratum counts must match it.
    """
    if alloc is not None:
        for z in pop.arms:
            realized = np.bincount(strata.codes(z)[draw.selected[pop.arm == z]], minlength=strata.K(z))
            if z not in alloc.n or tuple(realized.tolist()) != alloc.n[z]:
                raise StratumDrawMismatch(f"arm {z}: draw counts {realized.tolist()} differ from allocation {alloc.n.get(z)}")
    return _model_assisted(pop, strata, draw, MA_STRATIFIED, estimand, level, variance_mode)
