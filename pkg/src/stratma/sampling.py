"""Seeded simple-random and stratified sampling without replacement."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO, Mapping

import numpy as np

from .allocation import Allocation
from .core import PopulationTable, StrataAssignment
from .errors import AllocationInfeasible, BudgetExceedsArm

SRS = "srs"
STRATIFIED = "stratified"


@dataclass(frozen=True)
class Seed:
    """Master seed plus a stream index.

    Every random draw in the package asks for a generator keyed by extra
    integers (arm, stratum, replication, ...), so the result does not depend
    on the order in which draws are made.
    """

    master: int
    stream: int = 0

    def __post_init__(self) -> None:
        if not 0 <= int(self.master) < 2**64:
            raise ValueError("master seed must be a 64-bit unsigned integer")
        if int(self.stream) < 0:
            raise ValueError("stream index must be non-negative")

    def sequence(self, *key: int) -> np.random.SeedSequence:
        return np.random.SeedSequence(int(self.master), spawn_key=(int(self.stream), *map(int, key)))

    def rng(self, *key: int) -> np.random.Generator:
        return np.random.default_rng(self.sequence(*key))


def as_seed(seed: Seed | int) -> Seed:
    return seed if isinstance(seed, Seed) else Seed(int(seed))


@dataclass(frozen=True, eq=False)
class SampleDraw:
    """Units chosen for gold coding.

    ``selected`` is a boolean mask aligned with the population rows;
    ``counts`` maps (arm, stratum) to the realized n_zk. An SRS draw reports
    one pseudo-stratum per arm, labelled 1.
    """

    selected: np.ndarray
    ids: frozenset
    counts: Mapping[tuple[int, int], int]
    scheme: str

    def __len__(self) -> int:
        return len(self.ids)

    def arm_count(self, z: int) -> int:
        return sum(n for (a, _), n in self.counts.items() if a == z)

    def to_csv(self, pop: PopulationTable, stream: IO[str]) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["id", "sampled"])
        for uid, s in zip(pop.ids.tolist(), self.selected.tolist()):
            w.writerow([uid, int(s)])

    @classmethod
    def from_mask(
        cls, pop: PopulationTable, mask: np.ndarray, strata: StrataAssignment | None = None, scheme: str | None = None
    ) -> SampleDraw:
        mask = np.asarray(mask, dtype=bool).copy()
        if mask.shape != (len(pop),):
            raise ValueError("mask must have one entry per unit")
        mask.setflags(write=False)
        counts: dict[tuple[int, int], int] = {}
        for z in pop.arms:
            in_arm = pop.arm == z
            if strata is None:
                counts[(z, 1)] = int(np.sum(mask & in_arm))
            else:
                hits = np.bincount(strata.labels[mask & in_arm] - 1, minlength=strata.K(z))
                for k in range(strata.K(z)):
                    counts[(z, k + 1)] = int(hits[k])
        scheme = scheme or (SRS if strata is None else STRATIFIED)
        return cls(selected=mask, ids=frozenset(pop.ids[mask].tolist()), counts=counts, scheme=scheme)


def _partial_shuffle(pop: PopulationTable, members: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Rows picked by the first ``n`` steps of a Fisher-Yates shuffle.

    The shuffle runs over ``members`` (row indices) sorted by unit id, so the
    result does not depend on the row order of the table.
    """
    pool = members[np.argsort(pop.ids[members].astype(str), kind="stable")]
    for i in range(n):
        j = int(rng.integers(i, len(pool)))
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:n]


def _budget(budgets: int | Mapping[int, int], z: int) -> int:
    return int(budgets[z]) if isinstance(budgets, Mapping) else int(budgets)


def srs_sample(pop: PopulationTable, budgets: int | Mapping[int, int], seed: Seed | int) -> SampleDraw:
    """Exactly n_z units per arm, every subset of that size equally likely."""
    seed = as_seed(seed)
    mask = np.zeros(len(pop), dtype=bool)
    for z in pop.arms:
        members = np.flatnonzero(pop.arm == z)
        n = _budget(budgets, z)
        if n > len(members):
            raise BudgetExceedsArm(f"arm {z}: budget {n} exceeds {len(members)} units")
        if n < 0:
            raise ValueError("budgets must be non-negative")
        mask[_partial_shuffle(pop, members, n, seed.rng(z, 0))] = True
    return SampleDraw.from_mask(pop, mask, scheme=SRS)


def stratified_sample(pop: PopulationTable, strata: StrataAssignment, alloc: Allocation, seed: Seed | int) -> SampleDraw:
    """Independent SRS of n_zk units inside every (arm, stratum) cell."""
    seed = as_seed(seed)
    mask = np.zeros(len(pop), dtype=bool)
    for z in pop.arms:
        sizes = strata.sizes(z)
        quotas = alloc.quotas(z) if z in alloc.n else None
        if quotas is None or len(quotas) != len(sizes):
            raise AllocationInfeasible(f"allocation does not cover the {len(sizes)} strata of arm {z}")
        for k, (big_n, n) in enumerate(zip(sizes, quotas), start=1):
            if not 1 <= n <= big_n:
                raise AllocationInfeasible(f"arm {z} stratum {k}: quota {n} outside [1, {big_n}]")
            members = np.flatnonzero((pop.arm == z) & (strata.labels == k))
            mask[_partial_shuffle(pop, members, int(n), seed.rng(z, k))] = True
    return SampleDraw.from_mask(pop, mask, strata, scheme=STRATIFIED)


def order_sample(groups: np.ndarray, quotas: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Select the ``quotas[g]`` units with the smallest keys in each group.

    With i.i.d. continuous keys this is an exact simple random sample inside
    every group. Reusing one key per unit across designs gives the designs
    common random numbers. ``groups`` holds zero-based codes; the last axis
    of ``groups`` and ``keys`` indexes units, leading axes are batch axes.
    """
    groups = np.asarray(groups)
    keys = np.asarray(keys, dtype=float)
    groups, keys = np.broadcast_arrays(groups, keys)
    order = np.lexsort((keys, groups), axis=-1)
    g_sorted = np.take_along_axis(groups, order, axis=-1)
    m = groups.shape[-1]
    pos = np.broadcast_to(np.arange(m), groups.shape)
    is_start = np.ones(groups.shape, dtype=bool)
    is_start[..., 1:] = g_sorted[..., 1:] != g_sorted[..., :-1]
    start = np.maximum.accumulate(np.where(is_start, pos, 0), axis=-1)
    rank_sorted = pos - start
    quotas = np.asarray(quotas)
    if quotas.ndim == 1:
        limit = quotas[g_sorted]
    else:
        limit = np.take_along_axis(quotas, g_sorted, axis=-1)
    take_sorted = rank_sorted < limit
    out = np.empty(groups.shape, dtype=bool)
    np.put_along_axis(out, order, take_sorted, axis=-1)
    return out
