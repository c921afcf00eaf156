"""Per-stratum coding quotas: proportional and capped Neyman allocation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import AllocationInfeasible, BudgetExceedsArm, BudgetTooSmall

PerArm = Union[Sequence, Mapping[int, Sequence]]


@dataclass(frozen=True)
class Allocation:
    """Integer quotas ``n[z][k-1]`` for stratum k of arm z.

    ``sizes`` carries the N_zk the quotas were computed for, so the
    allocation can be checked against a strata assignment later.
    """

    n: Mapping[int, tuple[int, ...]]
    sizes: Mapping[int, tuple[int, ...]]
    method: str = "manual"
    min_floor: int = 1
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        n = {int(z): tuple(int(v) for v in q) for z, q in sorted(self.n.items())}
        sizes = {int(z): tuple(int(v) for v in s) for z, s in sorted(self.sizes.items())}
        if set(n) != set(sizes):
            raise ValueError("quotas and sizes must cover the same arms")
        for z in n:
            if len(n[z]) != len(sizes[z]):
                raise ValueError(f"arm {z}: {len(n[z])} quotas for {len(sizes[z])} strata")
            for k, (q, big_n) in enumerate(zip(n[z], sizes[z]), start=1):
                if q > big_n or q < min(self.min_floor, big_n):
                    raise AllocationInfeasible(f"arm {z} stratum {k}: quota {q} outside [{min(self.min_floor, big_n)}, {big_n}]")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "sizes", sizes)

    @property
    def arms(self) -> tuple[int, ...]:
        return tuple(self.n)

    def budget(self, z: int) -> int:
        return sum(self.n[z])

    def n_zk(self, z: int, k: int) -> int:
        return self.n[z][k - 1]

    def quotas(self, z: int) -> np.ndarray:
        return np.asarray(self.n[z], dtype=int)

    @property
    def counts(self) -> dict[tuple[int, int], int]:
        return {(z, k + 1): q for z, qs in self.n.items() for k, q in enumerate(qs)}

    def rows(self) -> list[tuple[int, int, int, int]]:
        return [(z, k + 1, self.sizes[z][k], q) for z, qs in self.n.items() for k, q in enumerate(qs)]

    @classmethod
    def manual(cls, n: PerArm, sizes: PerArm, min_floor: int = 1) -> Allocation:
        return cls(n=_per_arm(n), sizes=_per_arm(sizes), method="manual", min_floor=min_floor)


def _per_arm(x: PerArm) -> dict[int, tuple]:
    if isinstance(x, Mapping):
        return {int(z): tuple(v) for z, v in x.items()}
    return {0: tuple(x)}


def _budget_for(budget: int | Mapping[int, int], z: int) -> int:
    return int(budget[z]) if isinstance(budget, Mapping) else int(budget)


def largest_remainder(targets: np.ndarray, total: int) -> np.ndarray:
    """Round real ``targets`` to integers summing to ``total``.

    Units left after flooring go to the largest fractional parts; ties go to
    the smaller index.
    """
    targets = np.asarray(targets, dtype=float)
    base = np.floor(targets + 1e-9)
    rem = np.clip(targets - base, 0.0, None)
    out = base.astype(int)
    extra = int(total - out.sum())
    if extra < 0:
        raise ValueError("targets exceed the total")
    order = np.argsort(-rem, kind="stable")
    out[order[:extra]] += 1
    return out


def _repair_floor(n: np.ndarray, floors: np.ndarray) -> np.ndarray:
    """Raise quotas below their floor, taking units from the largest quotas."""
    n = n.copy()
    for k in np.flatnonzero(n < floors):
        while n[k] < floors[k]:
            donors = np.where(n > floors, n, -1)
            j = int(np.argmax(donors))
            if donors[j] < 0:
                raise BudgetTooSmall("budget cannot satisfy the minimum per-stratum quota")
            n[j] -= 1
            n[k] += 1
    return n


def _check_budget(sizes: np.ndarray, budget: int, floors: np.ndarray, z: int) -> None:
    if budget > sizes.sum():
        raise BudgetExceedsArm(f"arm {z}: budget {budget} exceeds {sizes.sum()} units")
    if budget < floors.sum():
        raise BudgetTooSmall(f"arm {z}: budget {budget} below the {floors.sum()} units needed for per-stratum floors")


def _proportional_arm(sizes: np.ndarray, budget: int, min_floor: int, z: int = 0) -> np.ndarray:
    floors = np.minimum(min_floor, sizes)
    _check_budget(sizes, budget, floors, z)
    n = largest_remainder(budget * sizes / sizes.sum(), budget)
    return _repair_floor(n, floors)


def neyman_targets(sizes: Sequence[int], sds: Sequence[float], budget: float) -> tuple[np.ndarray, int]:
    """Continuous Neyman quotas with iterative capping at stratum size.

    Returns the real-valued targets and the number of passes the capping loop
    needed (at most K).
    """
    sizes = np.asarray(sizes, dtype=float)
    sds = np.asarray(sds, dtype=float)
    capped = np.zeros(len(sizes), dtype=bool)
    targets = np.zeros(len(sizes))
    passes = 0
    while True:
        passes += 1
        free = ~capped
        left = budget - sizes[capped].sum()
        weight = sizes * sds * free
        targets = np.where(capped, sizes, left * weight / weight.sum() if weight.sum() > 0 else 0.0)
        over = free & (targets > sizes)
        if not over.any():
            return targets, passes
        capped |= over


def exchange_refine(n: np.ndarray, sizes: np.ndarray, sds: np.ndarray, floors: np.ndarray) -> np.ndarray:
    """Move single units between strata while the stratified variance drops.

    Each stratum contributes ``(N_k s_k)^2 (1/n_k - 1/N_k)`` to the
    conditional variance, which is convex in ``n_k``; with a fixed total, an
    allocation no single-unit transfer can improve is the integer optimum.
    """
    n = n.copy()
    c = (np.asarray(sizes, dtype=float) * np.asarray(sds, dtype=float)) ** 2
    while True:
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(n < sizes, c / (n * (n + 1.0)), -np.inf)
            loss = np.where(n > floors, c / ((n - 1.0) * n), np.inf)
        k = int(np.argmax(gain))
        j = int(np.argmin(loss))
        if k == j or not gain[k] - loss[j] > 1e-12 * max(gain[k], 1e-300):
            return n
        n[k] += 1
        n[j] -= 1


def _neyman_arm(
    sizes: np.ndarray, sds: np.ndarray, budget: int, min_floor: int, z: int = 0, refine: bool = True
) -> tuple[np.ndarray, list[str]]:
    if np.any(sds < 0) or not np.all(np.isfinite(sds)):
        raise ValueError("stratum SDs must be finite and non-negative")
    floors = np.minimum(min_floor, sizes)
    _check_budget(sizes, budget, floors, z)
    if not np.any(sds > 0):
        return _proportional_arm(sizes, budget, min_floor, z), [f"AllZeroSD({z})"]
    zero = sds == 0
    targets = np.where(zero, floors, 0.0).astype(float)
    live, _ = neyman_targets(sizes[~zero], sds[~zero], budget - floors[zero].sum())
    targets[~zero] = live
    n = _repair_floor(largest_remainder(targets, budget), floors)
    if refine:
        n = exchange_refine(n, sizes, sds, floors)
    return n, []


def proportional_allocation(sizes: PerArm, budget: int | Mapping[int, int], min_floor: int = 2) -> Allocation:
    sizes_by_arm = _per_arm(sizes)
    n = {}
    for z, s in sizes_by_arm.items():
        n[z] = tuple(_proportional_arm(np.asarray(s, dtype=int), _budget_for(budget, z), min_floor, z))
    return Allocation(n=n, sizes=sizes_by_arm, method="proportional", min_floor=min_floor)


def neyman_allocation(
    sizes: PerArm, sds: PerArm, budget: int | Mapping[int, int], min_floor: int = 2, refine: bool = True
) -> Allocation:
    """Capped Neyman allocation rounded by largest remainder.

    Strata with zero SD get exactly the floor quota before the remaining
    budget is split. If every SD in an arm is zero the arm falls back to
    proportional allocation and the returned allocation carries an
    ``AllZeroSD`` flag.

    With ``refine`` (the default) the rounded quotas are passed through
    :func:`exchange_refine`, which makes them the exact integer minimiser of
    the conditional variance under the floor and cap constraints. Plain
    rounding can be far from that optimum when a stratum is close to being
    fully coded.
    """
    sizes_by_arm = _per_arm(sizes)
    sds_by_arm = _per_arm(sds)
    n, flags = {}, []
    for z, s in sizes_by_arm.items():
        q, f = _neyman_arm(
            np.asarray(s, dtype=int), np.asarray(sds_by_arm[z], dtype=float), _budget_for(budget, z), min_floor, z, refine
        )
        n[z] = tuple(q)
        flags += f
    return Allocation(n=n, sizes=sizes_by_arm, method="neyman", min_floor=min_floor, flags=tuple(flags))


def parse_budget(text: str | float | int, arm_size: int) -> int:
    """Budget for one arm from ``40`` (units), ``0.3`` or ``0.3N`` (fraction).

    Fractions are floored: ``0.3N`` of 101 units is 30.
    """
    s = str(text).strip()
    frac = s.endswith(("N", "n"))
    s = s.rstrip("Nn")
    try:
        v = float(s)
    except ValueError:
        raise ValueError(f"cannot parse budget {text!r}") from None
    if frac or (0 < v < 1) or (v == 1 and "." in s):
        if not 0 < v <= 1:
            raise ValueError(f"budget fraction {v} outside (0, 1]")
        return int(np.floor(v * arm_size + 1e-9))
    if v != int(v) or v < 0:
        raise ValueError(f"budget {text!r} must be a whole number of units")
    return int(v)
