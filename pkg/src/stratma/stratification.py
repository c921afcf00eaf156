"""Candidate stratifications from surrogate scores and features, and their scores."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .allocation import neyman_allocation, proportional_allocation
from .core import PopulationTable, StrataAssignment
from .errors import AllValuesEqual, UncodedUnit, UnknownVariable
from .variance import bs_ws_decomposition, stratum_moments

DEFAULT_GRANULARITIES = (3, 4, 5)
DEFAULT_CROSSES = ((2, 2), (2, 3), (3, 2), (3, 3))
DEFAULT_MIN_SIZE = 100
DEFAULT_MAX_RATIO = 10.0


class StratificationWarning(UserWarning):
    pass


def quantile_cut(values: Sequence[float], q: int, require_multiple: bool = False) -> np.ndarray:
    """Label values 1..q by empirical quantile group.

    Cut points are the inverted-CDF quantiles at i/q and each group is
    closed on the right, so tied values always share a label. Groups left
    empty by ties are dropped and the labels renumbered.
    """
    if q < 2:
        raise ValueError("q must be at least 2")
    v = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    cuts = np.quantile(v, np.arange(1, q) / q, method="inverted_cdf")
    raw = np.searchsorted(cuts, v, side="left")
    _, labels = np.unique(raw, return_inverse=True)
    labels = labels.reshape(v.shape) + 1
    if labels.max(initial=1) == 1:
        if require_multiple:
            raise AllValuesEqual("all values are equal; cannot form two or more groups")
        warnings.warn("all values equal; returning a single group", StratificationWarning, stacklevel=2)
    return labels


def cross_strata(a: Sequence[int], b: Sequence[int]) -> np.ndarray:
    """Dense labels for the occupied cells of ``a`` x ``b``, ordered by (a, b)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("label vectors must have the same length")
    pairs = np.stack([a, b], axis=1)
    _, labels = np.unique(pairs, axis=0, return_inverse=True)
    return labels.reshape(-1) + 1


def merge_small_cells(labels: Sequence[int], score: Sequence[float], min_cell: int) -> np.ndarray:
    """Fold cells with fewer than ``min_cell`` units into their neighbours.

    The smallest cell is merged into the cell whose mean ``score`` is
    closest, repeatedly, then labels are renumbered by mean score.
    """
    labels = np.asarray(labels).copy()
    score = np.asarray(score, dtype=float)
    while True:
        levels, counts = np.unique(labels, return_counts=True)
        if len(levels) < 2 or counts.min() >= min_cell:
            break
        small = levels[np.argmin(counts)]
        means = np.array([score[labels == lv].mean() for lv in levels])
        own = means[levels == small][0]
        dist = np.where(levels == small, np.inf, np.abs(means - own))
        labels[labels == small] = levels[np.argmin(dist)]
    levels = np.unique(labels)
    order = np.argsort([score[labels == lv].mean() for lv in levels], kind="stable")
    remap = {lv: i + 1 for i, lv in enumerate(levels[order])}
    return np.array([remap[v] for v in labels], dtype=int)


@dataclass(frozen=True, eq=False)
class CandidateStratification:
    name: str
    variables: tuple[str, ...]
    granularities: tuple[int, ...]
    assignment: StrataAssignment

    @property
    def K(self) -> dict[int, int]:
        return dict(self.assignment.n_strata)

    @property
    def total_strata(self) -> int:
        return sum(self.assignment.n_strata.values())


@dataclass(frozen=True)
class CandidateMetrics:
    var_of_stratum_means: float
    balance_ratio: float
    min_stratum_size: int
    excluded: bool = False
    reasons: tuple[str, ...] = ()
    bs: float | None = None
    ws: float | None = None
    delta: float | None = None
    residual_variance_ratio: float | None = None

    def as_row(self) -> dict[str, float | int | str | None]:
        row = {
            "var_of_stratum_means": self.var_of_stratum_means,
            "balance_ratio": self.balance_ratio,
            "min_size": self.min_stratum_size,
            "excluded": int(self.excluded),
            "reasons": ";".join(self.reasons),
        }
        if self.delta is not None:
            row.update(bs=self.bs, ws=self.ws, delta=self.delta, residual_variance_ratio=self.residual_variance_ratio)
        return row


def variable_values(pop: PopulationTable, name: str) -> np.ndarray:
    if name == "y_hat":
        return pop.y_hat
    if name not in pop.features:
        raise UnknownVariable(f"unknown variable {name!r}; available: y_hat, {', '.join(pop.features)}")
    col = pop.features[name]
    try:
        v = np.asarray(col, dtype=float)
    except (TypeError, ValueError):
        raise UnknownVariable(f"variable {name!r} is not numeric") from None
    if not np.all(np.isfinite(v)):
        raise UnknownVariable(f"variable {name!r} has missing or non-finite values")
    return v


def _per_arm_cut(pop: PopulationTable, values: np.ndarray, q: int) -> np.ndarray:
    # Cut points are computed separately inside each arm.
    labels = np.zeros(len(pop), dtype=int)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", StratificationWarning)
        for z in pop.arms:
            idx = pop.arm == z
            labels[idx] = quantile_cut(values[idx], q)
    return labels


def _per_arm_cross(pop: PopulationTable, a: np.ndarray, b: np.ndarray, min_cell: int) -> np.ndarray:
    labels = np.zeros(len(pop), dtype=int)
    for z in pop.arms:
        idx = pop.arm == z
        crossed = cross_strata(a[idx], b[idx])
        labels[idx] = merge_small_cells(crossed, pop.y_hat[idx], min_cell) if min_cell > 1 else crossed
    return labels


def generate_candidates(
    pop: PopulationTable,
    variables: Sequence[str] = ("y_hat",),
    granularities: Sequence[int] = DEFAULT_GRANULARITIES,
    crosses: Sequence[tuple[int, int]] = DEFAULT_CROSSES,
    min_cell: int = 2,
) -> list[CandidateStratification]:
    """Quantile strata per variable plus crosses for each unordered pair.

    Crossed cells smaller than ``min_cell`` are merged into the neighbour
    with the closest mean surrogate so no unit is left without a stratum.
    """
    variables = list(dict.fromkeys(variables))
    values = {v: variable_values(pop, v) for v in variables}
    out = []
    for v in variables:
        for q in granularities:
            labels = _per_arm_cut(pop, values[v], q)
            out.append(CandidateStratification(f"{v}:q{q}", (v,), (q,), StrataAssignment(labels, pop.arm)))
    for a, b in itertools.combinations(variables, 2):
        for qa, qb in crosses:
            la = _per_arm_cut(pop, values[a], qa)
            lb = _per_arm_cut(pop, values[b], qb)
            labels = _per_arm_cross(pop, la, lb, min_cell)
            out.append(
                CandidateStratification(f"{a}:q{qa} x {b}:q{qb}", (a, b), (qa, qb), StrataAssignment(labels, pop.arm))
            )
    return out


def _weighted_mean_spread(values: np.ndarray, codes: np.ndarray, K: int) -> float:
    counts, means, _ = stratum_moments(values, codes, None, K)
    w = counts / counts.sum()
    keep = counts > 0
    return float(np.sum(w[keep] * (means[keep] - values.mean()) ** 2))


def precoding_metrics(
    pop: PopulationTable,
    candidate: CandidateStratification,
    min_size: int = DEFAULT_MIN_SIZE,
    max_ratio: float = DEFAULT_MAX_RATIO,
) -> CandidateMetrics:
    """Score a candidate using only surrogates and stratum sizes."""
    st = candidate.assignment
    spread, weight, sizes = 0.0, 0, []
    for z in st.n_strata:
        idx = pop.arm == z
        spread += idx.sum() * _weighted_mean_spread(pop.y_hat[idx], st.codes(z), st.K(z))
        weight += idx.sum()
        sizes += st.sizes(z).tolist()
    ratio = max(sizes) / min(sizes) if min(sizes) > 0 else float("inf")
    reasons = []
    if ratio > max_ratio:
        reasons.append(f"balance_ratio {ratio:.3g} > {max_ratio:g}")
    if min(sizes) < min_size:
        reasons.append(f"min_size {min(sizes)} < {min_size}")
    return CandidateMetrics(
        var_of_stratum_means=spread / weight,
        balance_ratio=float(ratio),
        min_stratum_size=int(min(sizes)),
        excluded=bool(reasons),
        reasons=tuple(reasons),
    )


def rank_candidates(
    candidates: Sequence[CandidateStratification],
    metrics: Sequence[CandidateMetrics],
    min_size: int | None = None,
    max_ratio: float | None = None,
) -> list[tuple[CandidateStratification, CandidateMetrics]]:
    """Drop filtered candidates, then sort by spread of stratum means.

    Ties go to fewer strata, then to the name. ``min_size``/``max_ratio``
    re-apply the filters with new thresholds; by default the ``excluded``
    flag computed with the metrics is used.
    """
    kept = []
    for c, m in zip(candidates, metrics):
        if min_size is None and max_ratio is None:
            drop = m.excluded
        else:
            drop = (max_ratio is not None and m.balance_ratio > max_ratio) or (
                min_size is not None and m.min_stratum_size < min_size
            )
        if not drop:
            kept.append((c, m))
    if candidates and not kept:
        warnings.warn("AllFiltered: every candidate stratification was filtered out", StratificationWarning, stacklevel=2)
    kept.sort(key=lambda cm: (-cm[1].var_of_stratum_means, cm[0].total_strata, cm[0].name))
    return kept


def oracle_metrics(
    pop: PopulationTable,
    candidate: CandidateStratification,
    budget: int | Mapping[int, int],
    method: str = "proportional",
    min_floor: int = 2,
    base: CandidateMetrics | None = None,
) -> CandidateMetrics:
    """Retrospective BS/WS scores from fully coded data.

    ``method`` is ``proportional`` or ``neyman`` (the latter uses the true
    stratum residual SDs).
    """
    if not pop.coded.all():
        raise UncodedUnit("oracle metrics need every unit coded")
    st = candidate.assignment
    resid = pop.y - pop.y_hat
    sizes = {z: st.sizes(z) for z in st.n_strata}
    variances = {}
    for z in st.n_strata:
        _, _, var = stratum_moments(resid[pop.arm == z], st.codes(z), None, st.K(z))
        variances[z] = np.where(sizes[z] > 1, var, 0.0)
    if method == "proportional":
        alloc = proportional_allocation(sizes, budget, min_floor)
    elif method == "neyman":
        alloc = neyman_allocation(sizes, {z: np.sqrt(v) for z, v in variances.items()}, budget, min_floor)
    else:
        raise ValueError(f"unknown allocation method {method!r}")
    dec = bs_ws_decomposition(resid, st, alloc)
    all_var = np.concatenate(list(variances.values()))
    ratio = float(all_var.max() / all_var.min()) if all_var.min() > 0 else float("inf")
    base = base or precoding_metrics(pop, candidate)
    return replace(base, bs=dec.bs, ws=dec.ws, delta=dec.delta, residual_variance_ratio=ratio)
