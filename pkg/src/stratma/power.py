"""Minimum detectable effect as a function of the coding fraction."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import IO, Mapping, Sequence

import numpy as np

from .core import PopulationTable, StrataAssignment
from .errors import ConfigError
from .variance import stratum_moments

SRS = "srs"
STRATIFIED = "stratified_proportional"


@dataclass(frozen=True)
class ArmDesign:
    """Planning inputs for one arm.

    ``resid_means``/``resid_vars`` are per-stratum residual means and
    variances; ``outcome_var`` is the arm's gold-outcome variance.
    """

    size: int
    stratum_sizes: tuple[int, ...]
    resid_means: tuple[float, ...]
    resid_vars: tuple[float, ...]
    outcome_var: float

    def __post_init__(self) -> None:
        k = len(self.stratum_sizes)
        if not (len(self.resid_means) == len(self.resid_vars) == k):
            raise ConfigError("per-stratum inputs must have equal length")
        if any(v < 0 for v in self.resid_vars) or self.outcome_var < 0:
            raise ConfigError("variances must be non-negative")
        if self.size < 1 or any(n < 1 for n in self.stratum_sizes):
            raise ConfigError("sizes must be positive")

    @property
    def weights(self) -> np.ndarray:
        n = np.asarray(self.stratum_sizes, dtype=float)
        return n / n.sum()

    @property
    def within(self) -> float:
        """Stratum-weighted mean residual variance."""
        return float(np.sum(self.weights * np.asarray(self.resid_vars)))

    @property
    def pooled(self) -> float:
        """Arm residual variance: within part plus spread of stratum means."""
        mu = np.asarray(self.resid_means)
        w = self.weights
        return self.within + float(np.sum(w * (mu - np.sum(w * mu)) ** 2))


@dataclass(frozen=True)
class PowerDesign:
    arms: Mapping[int, ArmDesign]
    alpha: float = 0.05
    power: float = 0.80
    h_grid: tuple[float, ...] = field(default_factory=lambda: tuple(np.round(np.arange(0.05, 0.951, 0.05), 10)))

    def __post_init__(self) -> None:
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if not 0 < self.power < 1:
            raise ConfigError("power must lie in (0, 1)")
        if any(not 0 < h <= 1 for h in self.h_grid):
            raise ConfigError("coding fractions must lie in (0, 1]")

    @property
    def multiplier(self) -> float:
        return float(NormalDist().inv_cdf(1 - self.alpha / 2) + NormalDist().inv_cdf(self.power))

    def standard_error(self, h: float, method: str) -> float:
        """SE of the effect estimate when a fraction h of each arm is coded.

        Stratified coding uses proportional quotas; the Var(tau)/N term is
        dropped, so the value is an upper bound.
        """
        if not 0 < h <= 1:
            raise ConfigError("coding fraction must lie in (0, 1]")
        if method not in (SRS, STRATIFIED):
            raise ConfigError(f"unknown method {method!r}")
        var = 0.0
        for arm in self.arms.values():
            resid = arm.pooled if method == SRS else arm.within
            var += arm.outcome_var / arm.size + (1 - h) / (h * arm.size) * resid
        return math.sqrt(var)


def mdes_curve(design: PowerDesign, method: str = STRATIFIED, h_grid: Sequence[float] | None = None) -> list[tuple[float, float]]:
    grid = design.h_grid if h_grid is None else tuple(h_grid)
    m = design.multiplier
    return [(float(h), m * design.standard_error(h, method)) for h in grid]


def design_from_population(
    pop: PopulationTable, strata: StrataAssignment, alpha: float = 0.05, power: float = 0.80, **kw
) -> PowerDesign:
    """Planning inputs estimated from the coded units of a table.

    Stratum sizes count all units; residual and outcome moments use coded
    units only (a pilot sample or a retrospective fully coded study).
    """
    arms = {}
    for z in pop.arms:
        in_arm = pop.arm == z
        coded = pop.coded[in_arm]
        codes = strata.codes(z)
        resid = np.where(coded, pop.y[in_arm] - pop.y_hat[in_arm], 0.0)
        counts, means, var = stratum_moments(resid, codes, coded, strata.K(z))
        if np.any(counts < 2):
            raise ConfigError(f"arm {z}: every stratum needs at least two coded units")
        y = pop.y[in_arm][coded]
        arms[z] = ArmDesign(
            size=int(in_arm.sum()),
            stratum_sizes=tuple(int(n) for n in strata.sizes(z)),
            resid_means=tuple(means.tolist()),
            resid_vars=tuple(var.tolist()),
            outcome_var=float(np.var(y, ddof=1)),
        )
    return PowerDesign(arms, alpha=alpha, power=power, **kw)


def read_design(stream: IO[str], alpha: float = 0.05, power: float = 0.80, **kw) -> PowerDesign:
    """Design CSV with columns arm, stratum, N, resid_mean, resid_var, y_var.

    ``y_var`` is the arm's outcome variance and must repeat on every row of
    that arm.
    """
    rows = list(csv.DictReader(stream))
    need = {"arm", "stratum", "N", "resid_mean", "resid_var", "y_var"}
    if not rows or need - set(rows[0]):
        raise ConfigError(f"design file needs columns {sorted(need)}")
    by_arm: dict[int, list[dict]] = {}
    for r in rows:
        by_arm.setdefault(int(r["arm"]), []).append(r)
    arms = {}
    for z, rs in sorted(by_arm.items()):
        rs.sort(key=lambda r: int(r["stratum"]))
        yv = {float(r["y_var"]) for r in rs}
        if len(yv) != 1:
            raise ConfigError(f"arm {z}: y_var differs across rows")
        sizes = tuple(int(r["N"]) for r in rs)
        arms[z] = ArmDesign(
            size=sum(sizes),
            stratum_sizes=sizes,
            resid_means=tuple(float(r["resid_mean"]) for r in rs),
            resid_vars=tuple(float(r["resid_var"]) for r in rs),
            outcome_var=yv.pop(),
        )
    return PowerDesign(arms, alpha=alpha, power=power, **kw)
