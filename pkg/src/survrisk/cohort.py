"""Cohort data model, CSV ingestion, eligibility, location merging and splitting.

A :class:`Cohort` stores one numpy column per subject field so that the
fitting code can work on arrays directly; :class:`Subject` is the row view.

Prior statin use and prior cardiovascular events are assumed to have been
excluded upstream; those flags are not part of the record.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    DuplicateIdError,
    EmptyCohortError,
    RowError,
    SchemaError,
)

__all__ = [
    "BOOL_FIELDS",
    "COLUMNS",
    "Cohort",
    "LocationMap",
    "Subject",
    "apply_eligibility",
    "load_cohort",
    "merge_locations",
    "split_train_test",
    "write_cohort",
]

BOOL_FIELDS = ("hypertension", "diabetes", "smoker", "antihypertensive", "ckd", "ra")
COLUMNS = (
    "id", "age", "sex", "hdl", "total_cholesterol", *BOOL_FIELDS,
    "zip5", "follow_up_days", "event",
)
_ZIP5 = re.compile(r"^[0-9]{5}$")

FIVE_YEARS_DAYS = 1826.0


@dataclass(frozen=True)
class Subject:
    id: str
    age: int
    sex: str
    hdl: float
    total_cholesterol: float
    hypertension: bool
    diabetes: bool
    smoker: bool
    antihypertensive: bool
    ckd: bool
    ra: bool
    zip5: str
    follow_up_days: float
    event: bool


@dataclass(frozen=True, eq=False)
class Cohort:
    """Immutable column store of subjects.

    ``male`` holds sex as a boolean (female is 0). All arrays share the
    subject order given at construction.
    """

    ids: np.ndarray
    age: np.ndarray
    male: np.ndarray
    hdl: np.ndarray
    total_cholesterol: np.ndarray
    hypertension: np.ndarray
    diabetes: np.ndarray
    smoker: np.ndarray
    antihypertensive: np.ndarray
    ckd: np.ndarray
    ra: np.ndarray
    zip5: np.ndarray
    follow_up_days: np.ndarray
    event: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        n = len(self.ids)
        if n == 0:
            raise EmptyCohortError("cohort must contain at least one subject")
        conv = {
            "ids": lambda a: np.asarray(a, dtype=object),
            "age": lambda a: np.asarray(a, dtype=np.int64),
            "male": lambda a: np.asarray(a, dtype=bool),
            "hdl": lambda a: np.asarray(a, dtype=float),
            "total_cholesterol": lambda a: np.asarray(a, dtype=float),
            "zip5": lambda a: np.asarray(a, dtype=object),
            "follow_up_days": lambda a: np.asarray(a, dtype=float),
            "event": lambda a: np.asarray(a, dtype=bool),
        }
        for name in BOOL_FIELDS:
            conv[name] = lambda a: np.asarray(a, dtype=bool)
        for name, fn in conv.items():
            arr = fn(getattr(self, name))
            if arr.shape != (n,):
                raise DataError(f"column {name!r} has shape {arr.shape}, expected ({n},)")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if len(set(self.ids.tolist())) != n:
            seen, dup = set(), None
            for i in self.ids:
                if i in seen:
                    dup = i
                    break
                seen.add(i)
            raise DuplicateIdError(f"duplicate subject id: {dup!r}")
        if not np.all(self.follow_up_days > 0):
            raise DataError("follow_up_days must be positive")
        bad = [z for z in self.zip5 if not (isinstance(z, str) and _ZIP5.match(z))]
        if bad:
            raise DataError(f"zip5 must be 5 digits (got {bad[0]!r})")

    def __len__(self):
        return len(self.ids)

    def __iter__(self) -> Iterator[Subject]:
        for i in range(len(self)):
            yield self.subject(i)

    @property
    def subjects(self) -> list[Subject]:
        return list(self)

    def subject(self, i: int) -> Subject:
        return Subject(
            id=self.ids[i],
            age=int(self.age[i]),
            sex="M" if self.male[i] else "F",
            hdl=float(self.hdl[i]),
            total_cholesterol=float(self.total_cholesterol[i]),
            **{name: bool(getattr(self, name)[i]) for name in BOOL_FIELDS},
            zip5=self.zip5[i],
            follow_up_days=float(self.follow_up_days[i]),
            event=bool(self.event[i]),
        )

    @classmethod
    def from_subjects(cls, subjects: Sequence[Subject], provenance: str = "") -> "Cohort":
        if not subjects:
            raise EmptyCohortError("cohort must contain at least one subject")
        cols = {name: [getattr(s, name) for s in subjects] for name in COLUMNS}
        for s in subjects:
            if s.sex not in ("F", "M"):
                raise DataError(f"sex must be 'F' or 'M' (got {s.sex!r})")
        return cls(
            ids=cols["id"],
            age=cols["age"],
            male=[s == "M" for s in cols["sex"]],
            hdl=cols["hdl"],
            total_cholesterol=cols["total_cholesterol"],
            **{name: cols[name] for name in BOOL_FIELDS},
            zip5=cols["zip5"],
            follow_up_days=cols["follow_up_days"],
            event=cols["event"],
            provenance=provenance,
        )

    def subset(self, index, provenance: str | None = None) -> "Cohort":
        """Return the cohort restricted to ``index`` (boolean mask or positions)."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        return Cohort(
            **{name: getattr(self, name)[index] for name in _ARRAY_FIELDS},
            provenance=self.provenance if provenance is None else provenance,
        )

    @property
    def zip3(self) -> np.ndarray:
        return np.array([z[:3] for z in self.zip5], dtype=object)

    @property
    def time(self) -> np.ndarray:
        return self.follow_up_days

    def covariate(self, name: str) -> np.ndarray:
        """Numeric column for a covariate name (booleans and sex coded 0/1)."""
        if name == "sex":
            return self.male.astype(float)
        if name in ("age", "hdl", "total_cholesterol") or name in BOOL_FIELDS:
            return getattr(self, name).astype(float)
        raise ConfigError(f"unknown covariate: {name!r}")


_ARRAY_FIELDS = (
    "ids", "age", "male", "hdl", "total_cholesterol", *BOOL_FIELDS,
    "zip5", "follow_up_days", "event",
)
COVARIATES = ("age", "sex", "hdl", "total_cholesterol", *BOOL_FIELDS)


# --------------------------------------------------------------------- CSV I/O

def _parse_flag(text, name):
    if text in ("0", "1"):
        return text == "1"
    raise ValueError(f"{name} must be 0 or 1 (got {text!r})")


def _parse_row(row, line):
    try:
        sid = row["id"].strip()
        if not sid:
            raise ValueError("id must be non-empty")
        age_f = float(row["age"])
        if not age_f.is_integer():
            raise ValueError(f"age must be an integer (got {row['age']!r})")
        sex = row["sex"].strip().upper()
        if sex not in ("F", "M"):
            raise ValueError(f"sex must be F or M (got {row['sex']!r})")
        hdl = float(row["hdl"])
        tc = float(row["total_cholesterol"])
        if not (math.isfinite(hdl) and math.isfinite(tc)):
            raise ValueError("hdl and total_cholesterol must be finite")
        flags = {name: _parse_flag(row[name].strip(), name) for name in BOOL_FIELDS}
        zip5 = row["zip5"].strip()
        if not _ZIP5.match(zip5):
            raise ValueError("zip5 must be 5 digits")
        fu = float(row["follow_up_days"])
        if not (math.isfinite(fu) and fu > 0):
            raise ValueError(f"follow_up_days must be positive (got {row['follow_up_days']!r})")
        event = _parse_flag(row["event"].strip(), "event")
    except (TypeError, ValueError) as exc:
        raise RowError(line, str(exc)) from None
    return Subject(sid, int(age_f), sex, hdl, tc, zip5=zip5, follow_up_days=fu,
                   event=event, **flags)


def load_cohort(path, schema: Mapping[str, str] | None = None, provenance: str | None = None) -> Cohort:
    """Read a cohort CSV.

    Parameters
    ----------
    path : path-like
        UTF-8 CSV with a header row.
    schema : mapping, optional
        Canonical column name -> header name in the file. Columns not listed
        are expected under their canonical name.

    Raises
    ------
    SchemaError
        A required column is absent from the header.
    RowError
        A cell fails to parse or violates a subject invariant; ``line`` is the
        physical line number in the file (the header is line 1).
    DuplicateIdError
        Two rows share an id.
    """
    path = Path(path)
    schema = dict(schema or {})
    unknown = set(schema) - set(COLUMNS)
    if unknown:
        raise ConfigError(f"schema names unknown columns: {sorted(unknown)}")
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(COLUMNS[0], f"{path}: empty file") from None
        header = [h.strip() for h in header]
        positions = {}
        for col in COLUMNS:
            name = schema.get(col, col)
            if name not in header:
                raise SchemaError(col, f"missing column: {name!r}")
            positions[col] = header.index(name)
        subjects = []
        seen = {}
        for lineno, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise RowError(lineno, f"expected {len(header)} fields, found {len(cells)}")
            row = {col: cells[pos] for col, pos in positions.items()}
            s = _parse_row(row, lineno)
            if s.id in seen:
                raise DuplicateIdError(
                    f"line {lineno}: duplicate id {s.id!r} (first seen on line {seen[s.id]})")
            seen[s.id] = lineno
            subjects.append(s)
    if not subjects:
        raise EmptyCohortError(f"{path}: no data rows")
    return Cohort.from_subjects(subjects, provenance=str(path) if provenance is None else provenance)


def write_cohort(cohort: Cohort, path) -> None:
    """Write ``cohort`` in the canonical CSV schema (floats in shortest round-trip form)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for i in range(len(cohort)):
            w.writerow([
                cohort.ids[i],
                int(cohort.age[i]),
                "M" if cohort.male[i] else "F",
                repr(float(cohort.hdl[i])),
                repr(float(cohort.total_cholesterol[i])),
                *(int(getattr(cohort, name)[i]) for name in BOOL_FIELDS),
                cohort.zip5[i],
                repr(float(cohort.follow_up_days[i])),
                int(cohort.event[i]),
            ])


# ----------------------------------------------------------------- eligibility

def apply_eligibility(cohort: Cohort) -> Cohort:
    """Keep subjects aged 40-75 with HDL 20-100 and total cholesterol 130-320 (inclusive)."""
    keep = (
        (cohort.age >= 40) & (cohort.age <= 75)
        & (cohort.hdl >= 20) & (cohort.hdl <= 100)
        & (cohort.total_cholesterol >= 130) & (cohort.total_cholesterol <= 320)
    )
    if not keep.any():
        raise EmptyCohortError("no subject satisfies the eligibility criteria")
    return cohort.subset(keep)


# ------------------------------------------------------------- location groups

@dataclass(frozen=True)
class LocationMap:
    """Assignment of zip3 prefixes to merged location groups.

    A group id is the lowest zip3 prefix among its members, so ids sort in
    prefix order and the reference level is ``min(group_sizes)``.
    """

    assignments: dict = field(default_factory=dict)
    group_sizes: dict = field(default_factory=dict)
    min_size: int = 3000

    @property
    def groups(self) -> list[str]:
        return sorted(self.group_sizes)

    def group_of(self, zip5_or_zip3: str) -> str:
        return self.assignments[zip5_or_zip3[:3]]

    def assign(self, cohort: Cohort) -> np.ndarray:
        """Group id per subject; raises DataError on an uncovered prefix."""
        out = np.empty(len(cohort), dtype=object)
        for i, z in enumerate(cohort.zip5):
            try:
                out[i] = self.assignments[z[:3]]
            except KeyError:
                raise DataError(f"zip3 {z[:3]!r} of subject {cohort.ids[i]!r} "
                                "is not covered by the location map") from None
        return out

    def to_dict(self) -> dict:
        return {
            "min_size": self.min_size,
            "assignments": dict(sorted(self.assignments.items())),
            "group_sizes": dict(sorted(self.group_sizes.items())),
        }

    @classmethod
    def from_dict(cls, d) -> "LocationMap":
        return cls(dict(d["assignments"]), {k: int(v) for k, v in d["group_sizes"].items()},
                   int(d.get("min_size", 3000)))


def merge_prefix_counts(counts: Mapping[str, int], min_size: int = 3000) -> LocationMap:
    """Merge zip3 groups given their subject counts.

    The smallest group below ``min_size`` (ties: lowest prefix) is merged
    with the nearest group, where distance is the smallest absolute
    difference between member prefixes read as integers (ties: the lower
    neighbour). Groups stay contiguous runs of the sorted prefixes, so only
    the two adjacent runs need to be compared.
    """
    if min_size < 1:
        raise ConfigError("min_size must be a positive integer")
    if not counts:
        raise EmptyCohortError("no locations to merge")
    prefixes = sorted(counts, key=lambda p: (int(p), p))
    # each run: [first prefix index, last prefix index, size]
    runs = [[i, i, int(counts[p])] for i, p in enumerate(prefixes)]
    value = [int(p) for p in prefixes]
    while len(runs) > 1:
        k = min(range(len(runs)), key=lambda r: (runs[r][2], value[runs[r][0]]))
        if runs[k][2] >= min_size:
            break
        left = value[runs[k][0]] - value[runs[k - 1][1]] if k > 0 else None
        right = value[runs[k + 1][0]] - value[runs[k][1]] if k + 1 < len(runs) else None
        j = k - 1 if right is None or (left is not None and left <= right) else k + 1
        a, b = sorted((j, k))
        runs[a:b + 1] = [[runs[a][0], runs[b][1], runs[a][2] + runs[b][2]]]
    assignments, sizes = {}, {}
    for first, last, size in runs:
        gid = prefixes[first]
        sizes[gid] = size
        for i in range(first, last + 1):
            assignments[prefixes[i]] = gid
    return LocationMap(assignments, sizes, min_size)


def merge_locations(cohort: Cohort, min_size: int = 3000) -> LocationMap:
    """Group subjects by zip3 and merge small groups with their nearest neighbour."""
    prefixes, n = np.unique(cohort.zip3.astype(str), return_counts=True)
    return merge_prefix_counts(dict(zip(prefixes.tolist(), n.tolist())), min_size)


# --------------------------------------------------------------------- splitting

def split_train_test(cohort: Cohort, train_fraction: float = 0.7, seed: int = 0):
    """Random disjoint split; train size is ``round(train_fraction * N)``.

    Both parts keep the original subject order.
    """
    if not (0.0 < train_fraction < 1.0):
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(cohort)
    if n < 2:
        raise DataError("need at least two subjects to split")
    n_train = int(math.floor(train_fraction * n + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return (cohort.subset(train_idx, provenance=f"{cohort.provenance}[train]"),
            cohort.subset(test_idx, provenance=f"{cohort.provenance}[test]"))
