"""Population tables, strata assignments, CSV ingestion and validation."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, TYPE_CHECKING, Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CodedUnitMissingY,
    DuplicateId,
    InvalidArm,
    MalformedRow,
    MissingColumn,
    NonNumericValue,
    SuspectedSentinel,
)

if TYPE_CHECKING:
    from .sampling import SampleDraw

# Numeric codes that are almost always "missing" markers in exported survey files.
SUSPECT_SENTINELS = frozenset({-99.0, -999.0, -9999.0})


class Mode(str, Enum):
    TWO_ARM = "two_arm"
    SINGLE_ARM = "single_arm"


@dataclass(frozen=True)
class UnitRecord:
    id: str
    arm: int | None
    y_hat: float
    y: float | None = None
    features: Mapping[str, Any] = field(default_factory=dict)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PopulationTable:
    """Column-oriented unit table.

    ``y`` holds NaN for uncoded units. In single-arm mode ``arm`` is all zeros.
    Arrays are made read-only on construction so tables can be shared freely.
    """

    ids: np.ndarray
    y_hat: np.ndarray
    arm: np.ndarray | None = None
    y: np.ndarray | None = None
    stratum: np.ndarray | None = None
    features: Mapping[str, np.ndarray] = field(default_factory=dict)
    mode: Mode | None = None

    def __post_init__(self) -> None:
        ids = np.asarray([str(i) for i in self.ids], dtype=object)
        n = len(ids)
        counts = Counter(ids.tolist())
        if len(counts) != n:
            dup = next(k for k, v in counts.items() if v > 1)
            raise DuplicateId(dup)

        y_hat = np.asarray(self.y_hat, dtype=float).copy()
        if y_hat.shape != (n,):
            raise ValueError("y_hat must have one value per unit")
        if not np.all(np.isfinite(y_hat)):
            bad = ids[~np.isfinite(y_hat)].tolist()
            raise NonNumericValue(f"non-finite surrogate score for units {bad[:5]}")

        mode = Mode(self.mode) if self.mode is not None else (
            Mode.TWO_ARM if self.arm is not None else Mode.SINGLE_ARM
        )
        if self.arm is None:
            arm = np.zeros(n, dtype=int)
        else:
            raw = np.asarray(self.arm)
            if raw.shape != (n,):
                raise ValueError("arm must have one value per unit")
            if not np.all(np.isin(raw, (0, 1))):
                raise InvalidArm(f"arm values must be 0 or 1, got {sorted(set(raw.tolist()) - {0, 1})}")
            arm = raw.astype(int)
            if mode is Mode.SINGLE_ARM:
                if len(np.unique(arm)) > 1:
                    raise InvalidArm("single_arm table has more than one arm value")
                arm = np.zeros(n, dtype=int)

        if self.y is None:
            y = np.full(n, np.nan)
        else:
            y = np.asarray(self.y, dtype=float).copy()
            if y.shape != (n,):
                raise ValueError("y must have one value per unit")
            if np.any(np.isinf(y)):
                raise NonNumericValue("gold outcomes must be finite when present")

        stratum = None
        if self.stratum is not None:
            stratum = np.asarray(self.stratum, dtype=object).copy()
            if stratum.shape != (n,):
                raise ValueError("stratum must have one value per unit")
            stratum = _readonly(stratum)

        feats = {}
        for name, col in dict(self.features).items():
            col = np.asarray(col).copy()
            if col.shape != (n,):
                raise ValueError(f"feature {name!r} must have one value per unit")
            feats[name] = _readonly(col)

        object.__setattr__(self, "ids", _readonly(ids))
        object.__setattr__(self, "y_hat", _readonly(y_hat))
        object.__setattr__(self, "arm", _readonly(arm))
        object.__setattr__(self, "y", _readonly(y))
        object.__setattr__(self, "stratum", stratum)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "mode", mode)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_arms(self) -> int:
        return 2 if self.mode is Mode.TWO_ARM else 1

    @property
    def arms(self) -> tuple[int, ...]:
        return (0, 1) if self.mode is Mode.TWO_ARM else (0,)

    @property
    def coded(self) -> np.ndarray:
        return ~np.isnan(self.y)

    def arm_mask(self, z: int) -> np.ndarray:
        return self.arm == z

    def arm_size(self, z: int) -> int:
        return int(np.sum(self.arm == z))

    def index_of(self, unit_ids: Iterable[str]) -> np.ndarray:
        pos = {u: i for i, u in enumerate(self.ids.tolist())}
        return np.array([pos[str(u)] for u in unit_ids], dtype=int)

    @property
    def units(self) -> list[UnitRecord]:
        out = []
        for i, uid in enumerate(self.ids.tolist()):
            y = float(self.y[i])
            feats = {k: v[i].item() if hasattr(v[i], "item") else v[i] for k, v in self.features.items()}
            out.append(
                UnitRecord(
                    id=uid,
                    arm=int(self.arm[i]) if self.mode is Mode.TWO_ARM else None,
                    y_hat=float(self.y_hat[i]),
                    y=None if math.isnan(y) else y,
                    features=feats,
                )
            )
        return out

    @classmethod
    def from_units(cls, units: Sequence[UnitRecord], mode: Mode | str | None = None) -> PopulationTable:
        if mode is None:
            mode = Mode.TWO_ARM if any(u.arm is not None for u in units) else Mode.SINGLE_ARM
        mode = Mode(mode)
        if mode is Mode.TWO_ARM and any(u.arm is None for u in units):
            raise InvalidArm("two_arm table requires an arm for every unit")
        names = sorted({k for u in units for k in u.features})
        feats = {k: np.array([u.features.get(k, np.nan) for u in units]) for k in names}
        return cls(
            ids=[u.id for u in units],
            y_hat=[u.y_hat for u in units],
            arm=[u.arm for u in units] if mode is Mode.TWO_ARM else None,
            y=[np.nan if u.y is None else u.y for u in units],
            features=feats,
            mode=mode,
        )

    def replace(self, **changes: Any) -> PopulationTable:
        kw = dict(
            ids=self.ids, y_hat=self.y_hat,
            arm=self.arm if self.mode is Mode.TWO_ARM else None,
            y=self.y, stratum=self.stratum, features=self.features, mode=self.mode,
        )
        kw.update(changes)
        return PopulationTable(**kw)

    def equals(self, other: PopulationTable) -> bool:
        if self.mode is not other.mode or len(self) != len(other):
            return False
        if not (np.array_equal(self.ids, other.ids) and np.array_equal(self.arm, other.arm)):
            return False
        if not np.array_equal(self.y_hat, other.y_hat):
            return False
        if not np.array_equal(self.y, other.y, equal_nan=True):
            return False
        if (self.stratum is None) != (other.stratum is None):
            return False
        if self.stratum is not None and [str(s) for s in self.stratum] != [str(s) for s in other.stratum]:
            return False
        if set(self.features) != set(other.features):
            return False
        for k, v in self.features.items():
            w = other.features[k]
            if v.dtype.kind == "f" and w.dtype.kind == "f":
                if not np.array_equal(v, w, equal_nan=True):
                    return False
            elif [str(a) for a in v] != [str(b) for b in w]:
                return False
        return True


@dataclass(frozen=True, eq=False)
class StrataAssignment:
    """Stratum label (1..K_z) of every unit, within that unit's arm.

    ``n_strata`` optionally declares K_z per arm; labels above the observed
    maximum then show up as empty strata in :func:`validate`.
    """

    labels: np.ndarray
    arm: np.ndarray
    n_strata: Mapping[int, int] | None = None

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.dtype.kind not in "iu":
            if labels.dtype.kind == "f" and np.all(labels == np.round(labels)):
                labels = labels.astype(int)
            else:
                raise ValueError("stratum labels must be integers 1..K")
        arm = np.asarray(self.arm, dtype=int)
        if labels.shape != arm.shape:
            raise ValueError("labels and arm must be aligned")
        if labels.size and labels.min() < 1:
            raise ValueError("stratum labels start at 1")
        k = {int(z): int(labels[arm == z].max()) for z in np.unique(arm)}
        if self.n_strata is not None:
            for z, kz in self.n_strata.items():
                if kz < k.get(int(z), 0):
                    raise ValueError(f"arm {z} declares {kz} strata but uses label {k[int(z)]}")
                k[int(z)] = int(kz)
        object.__setattr__(self, "labels", _readonly(labels.astype(int).copy()))
        object.__setattr__(self, "arm", _readonly(arm.copy()))
        object.__setattr__(self, "n_strata", dict(sorted(k.items())))

    def __len__(self) -> int:
        return len(self.labels)

    def K(self, z: int) -> int:
        return self.n_strata.get(int(z), 0)

    def sizes(self, z: int) -> np.ndarray:
        """N_zk for k = 1..K_z."""
        lab = self.labels[self.arm == z]
        return np.bincount(lab - 1, minlength=self.K(z))[: self.K(z)]

    @property
    def counts(self) -> dict[tuple[int, int], int]:
        return {(z, k + 1): int(n) for z in self.n_strata for k, n in enumerate(self.sizes(z))}

    def codes(self, z: int) -> np.ndarray:
        """Zero-based labels of the units in arm ``z`` (population order)."""
        return self.labels[self.arm == z] - 1

    @classmethod
    def from_labels(cls, pop: PopulationTable, labels: Sequence[int], n_strata: Mapping[int, int] | None = None):
        return cls(labels=np.asarray(labels), arm=pop.arm, n_strata=n_strata)

    @classmethod
    def from_mapping(cls, pop: PopulationTable, mapping: Mapping[str, int]) -> StrataAssignment:
        missing = [u for u in pop.ids.tolist() if u not in mapping]
        if missing:
            raise ValueError(f"units without a stratum: {missing[:5]}")
        return cls(labels=np.array([mapping[u] for u in pop.ids.tolist()]), arm=pop.arm)

    @classmethod
    def single(cls, pop: PopulationTable) -> StrataAssignment:
        return cls(labels=np.ones(len(pop), dtype=int), arm=pop.arm)

    @classmethod
    def from_column(cls, pop: PopulationTable) -> StrataAssignment:
        """Dense per-arm numbering of the table's raw stratum column."""
        if pop.stratum is None:
            raise MissingColumn("population has no stratum column")
        raw = [str(s) for s in pop.stratum]
        labels = np.zeros(len(pop), dtype=int)
        for z in pop.arms:
            idx = np.flatnonzero(pop.arm == z)
            levels = sorted({raw[i] for i in idx}, key=_level_key)
            code = {lv: j + 1 for j, lv in enumerate(levels)}
            for i in idx:
                labels[i] = code[raw[i]]
        return cls(labels=labels, arm=pop.arm)

    def as_mapping(self, pop: PopulationTable) -> dict[str, int]:
        return dict(zip(pop.ids.tolist(), self.labels.tolist()))


def _level_key(level: str):
    try:
        return (0, float(level), level)
    except ValueError:
        return (1, 0.0, level)


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass(frozen=True)
class ColumnMapping:
    id_col: str = "id"
    yhat_col: str = "y_hat"
    arm_col: str | None = None
    y_col: str | None = None
    stratum_col: str | None = None
    feature_cols: tuple[str, ...] = ()
    na_values: tuple[str, ...] = ()


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise NonNumericValue(f"row {row}: column {column!r} is not numeric: {text!r}") from None
    if not math.isfinite(v):
        raise NonNumericValue(f"row {row}: column {column!r} is not finite: {text!r}")
    return v


def load_population(stream: IO[bytes] | IO[str], mapping: ColumnMapping = ColumnMapping()) -> PopulationTable:
    """Read a UTF-8 CSV with a header row into a :class:`PopulationTable`.

    Row numbers in errors count the header as row 1. Blank ``y`` cells are
    uncoded units; numeric sentinels such as -999 are rejected unless listed
    in ``mapping.na_values``.
    """
    if isinstance(stream.read(0), bytes):
        stream = io.TextIOWrapper(stream, encoding="utf-8", newline="")  # type: ignore[arg-type]
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise MalformedRow(1, "missing header row") from None
    header = [h.strip() for h in header]
    if header and header[0].startswith("﻿"):
        header[0] = header[0][1:]
    wanted = [mapping.id_col, mapping.yhat_col, mapping.arm_col, mapping.y_col, mapping.stratum_col, *mapping.feature_cols]
    for col in wanted:
        if col is not None and col not in header:
            raise MissingColumn(f"column {col!r} not in header {header}")
    pos = {h: i for i, h in enumerate(header)}
    na = set(mapping.na_values)

    ids, y_hat, arm, y, stratum = [], [], [], [], []
    feats: dict[str, list[str]] = {c: [] for c in mapping.feature_cols}
    seen: set[str] = set()
    for rownum, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != len(header):
            raise MalformedRow(rownum, f"expected {len(header)} fields, got {len(row)}")
        uid = row[pos[mapping.id_col]].strip()
        if not uid:
            raise MalformedRow(rownum, "empty id")
        if uid in seen:
            raise DuplicateId(uid)
        seen.add(uid)
        ids.append(uid)
        y_hat.append(_parse_float(row[pos[mapping.yhat_col]].strip(), rownum, mapping.yhat_col))
        if mapping.arm_col is not None:
            a = row[pos[mapping.arm_col]].strip()
            if a not in ("0", "1", "0.0", "1.0"):
                raise InvalidArm(f"row {rownum}: arm must be 0 or 1, got {a!r}")
            arm.append(int(float(a)))
        if mapping.y_col is not None:
            cell = row[pos[mapping.y_col]].strip()
            if cell == "" or cell in na:
                y.append(np.nan)
            else:
                v = _parse_float(cell, rownum, mapping.y_col)
                if v in SUSPECT_SENTINELS:
                    raise SuspectedSentinel(
                        f"row {rownum}: y value {cell} looks like a missing-value code; "
                        "leave the cell empty or list it in na_values"
                    )
                y.append(v)
        if mapping.stratum_col is not None:
            s = row[pos[mapping.stratum_col]].strip()
            if not s:
                raise MalformedRow(rownum, "empty stratum label")
            stratum.append(s)
        for c in mapping.feature_cols:
            feats[c].append(row[pos[c]].strip())

    return PopulationTable(
        ids=ids,
        y_hat=y_hat,
        arm=arm if mapping.arm_col is not None else None,
        y=y if mapping.y_col is not None else None,
        stratum=stratum if mapping.stratum_col is not None else None,
        features={c: _feature_column(v) for c, v in feats.items()},
    )


def _feature_column(values: list[str]) -> np.ndarray:
    try:
        return np.array([float(v) if v else np.nan for v in values], dtype=float)
    except ValueError:
        return np.array(values, dtype=object)


def read_population(path: str, mapping: ColumnMapping = ColumnMapping()) -> PopulationTable:
    with open(path, "rb") as fh:
        return load_population(fh, mapping)


def _fmt(v: float) -> str:
    return "" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def write_population(pop: PopulationTable, stream: IO[str], mapping: ColumnMapping | None = None) -> ColumnMapping:
    """Write ``pop`` as CSV; returns the mapping that reads it back."""
    if mapping is None:
        mapping = ColumnMapping(
            id_col="id",
            yhat_col="y_hat",
            arm_col="arm" if pop.mode is Mode.TWO_ARM else None,
            y_col="y",
            stratum_col="stratum" if pop.stratum is not None else None,
            feature_cols=tuple(pop.features),
        )
    cols = [c for c in (mapping.id_col, mapping.arm_col, mapping.yhat_col, mapping.y_col, mapping.stratum_col) if c]
    cols += list(mapping.feature_cols)
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(cols)
    for i in range(len(pop)):
        row = [pop.ids[i]]
        if mapping.arm_col:
            row.append(str(int(pop.arm[i])))
        row.append(_fmt(pop.y_hat[i]))
        if mapping.y_col:
            row.append(_fmt(pop.y[i]))
        if mapping.stratum_col:
            row.append(str(pop.stratum[i]))
        for c in mapping.feature_cols:
            v = pop.features[c][i]
            row.append(_fmt(v) if pop.features[c].dtype.kind == "f" else str(v))
        w.writerow(row)
    return mapping


# ---------------------------------------------------------------------------
# Validation


@dataclass(frozen=True)
class Finding:
    code: str
    message: str
    unit_ids: tuple[str, ...] = ()


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[Finding, ...] = ()
    warnings: tuple[Finding, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.errors

    def codes(self) -> list[str]:
        return [f.code for f in self.errors] + [f.code for f in self.warnings]

    def render(self) -> str:
        lines = [f"error {f.code}: {f.message}" for f in self.errors]
        lines += [f"warning {f.code}: {f.message}" for f in self.warnings]
        return "\n".join(lines) if lines else "ok"


def validate(pop: PopulationTable, strata: StrataAssignment | None = None) -> ValidationReport:
    errors: list[Finding] = []
    warnings: list[Finding] = []
    if pop.mode is Mode.TWO_ARM:
        for z in (0, 1):
            if pop.arm_size(z) == 0:
                errors.append(Finding(f"EmptyArm({z})", f"no units assigned to arm {z}"))
    if strata is not None:
        if len(strata) != len(pop):
            errors.append(Finding("StrataLengthMismatch", f"{len(strata)} labels for {len(pop)} units"))
            return ValidationReport(tuple(errors), tuple(warnings))
        if not np.array_equal(strata.arm, pop.arm):
            errors.append(Finding("ModeMismatch", "strata arms disagree with the population's arms"))
        extra = set(strata.n_strata) - set(pop.arms)
        if extra:
            errors.append(Finding("ModeMismatch", f"strata declared for arms {sorted(extra)} absent in {pop.mode.value} table"))
        for (z, k), n in strata.counts.items():
            members = tuple(pop.ids[(pop.arm == z) & (strata.labels == k)].tolist())
            if n == 0:
                errors.append(Finding("EmptyStratum", f"arm {z} stratum {k} has no units"))
            elif n == 1:
                warnings.append(
                    Finding("SingletonStratum", f"arm {z} stratum {k} has a single unit; within-stratum variance undefined", members)
                )
    return ValidationReport(tuple(errors), tuple(warnings))


def residuals(pop: PopulationTable, draw: SampleDraw) -> dict[str, float]:
    """Gold minus surrogate for every coded unit in ``draw``."""
    out = {}
    for i in np.flatnonzero(draw.selected):
        if np.isnan(pop.y[i]):
            raise CodedUnitMissingY(pop.ids[i])
        out[pop.ids[i]] = float(pop.y[i] - pop.y_hat[i])
    return out
