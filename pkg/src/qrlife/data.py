"""Observed-data model: survival records, CSV ingestion, design matrices.

A :class:`Dataset` holds one right-censored sample: per subject a covariate
vector, a binary treatment, a nonnegative follow-up time, and an event
indicator (1 = event observed, 0 = censored).  Datasets are immutable after
construction and safe to share across parallel workers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "SchemaError",
    "ParseError",
    "ValidationError",
    "SurvivalRecord",
    "Dataset",
    "ColumnSchema",
    "FormulaSpec",
    "ingest_csv",
    "design_matrix",
]


class SchemaError(ValueError):
    """A required column is missing or a formula references an unknown name."""


class ParseError(ValueError):
    """A cell could not be parsed as a number."""


class ValidationError(ValueError):
    """A parsed value violates the data invariants."""


@dataclass(frozen=True)
class SurvivalRecord:
    """One subject: covariates, treatment arm, follow-up time, event flag."""

    covariates: tuple[float, ...]
    treatment: int
    follow_up: float
    event: int


class Dataset:
    """Immutable sample of survival records with named covariates.

    Parameters
    ----------
    covariates : array-like, shape (n, p)
    treatment : array-like of {0, 1}, shape (n,)
    follow_up : array-like of nonnegative floats, shape (n,)
    event : array-like of {0, 1}, shape (n,)
    covariate_names : sequence of str, length p
    """

    def __init__(self, covariates, treatment, follow_up, event, covariate_names):
        X = np.ascontiguousarray(covariates, dtype=float)
        if X.ndim != 2:
            raise ValidationError("covariates must be a 2-d array")
        a = np.asarray(treatment, dtype=float)
        y = np.asarray(follow_up, dtype=float)
        d = np.asarray(event, dtype=float)
        n = X.shape[0]
        if n == 0:
            raise ValidationError("dataset is empty")
        if not (a.shape == y.shape == d.shape == (n,)):
            raise ValidationError("treatment, follow_up, event must have one entry per row")
        names = tuple(str(c) for c in covariate_names)
        if len(names) != X.shape[1]:
            raise ValidationError(
                f"{len(names)} covariate names for {X.shape[1]} covariate columns"
            )
        if len(set(names)) != len(names):
            raise ValidationError("duplicate covariate names")
        for label, arr in (("covariates", X), ("treatment", a), ("follow_up", y), ("event", d)):
            bad = np.flatnonzero(~np.isfinite(arr if arr.ndim == 1 else arr.ravel()))
            if bad.size:
                row = bad[0] if arr.ndim == 1 else bad[0] // X.shape[1]
                raise ValidationError(f"non-finite {label} value in row {row + 1}")
        for label, arr in (("treatment", a), ("event", d)):
            bad = np.flatnonzero(~np.isin(arr, (0.0, 1.0)))
            if bad.size:
                raise ValidationError(
                    f"{label} must be 0 or 1; got {arr[bad[0]]} in row {bad[0] + 1}"
                )
        neg = np.flatnonzero(y < 0)
        if neg.size:
            raise ValidationError(f"negative follow_up {y[neg[0]]} in row {neg[0] + 1}")
        self._X = X
        self._a = a.astype(np.int8)
        self._y = y
        self._d = d.astype(np.int8)
        self._names = names
        for arr in (self._X, self._a, self._y, self._d):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self._X.shape[0]

    @property
    def covariate_names(self) -> tuple[str, ...]:
        return self._names

    @property
    def covariates(self) -> np.ndarray:
        return self._X

    @property
    def treatment(self) -> np.ndarray:
        return self._a

    @property
    def follow_up(self) -> np.ndarray:
        return self._y

    @property
    def event(self) -> np.ndarray:
        return self._d

    @property
    def records(self) -> list[SurvivalRecord]:
        """Materialize the sample as a list of records (file order)."""
        return [
            SurvivalRecord(tuple(self._X[i]), int(self._a[i]), float(self._y[i]), int(self._d[i]))
            for i in range(self.n)
        ]

    def take(self, indices) -> "Dataset":
        """New dataset from the given row indices (used by resampling).

        Rows of a validated dataset stay valid, so the invariant checks are
        skipped; this is the resampling hot path.
        """
        idx = np.asarray(indices, dtype=np.intp)
        new = object.__new__(Dataset)
        new._X = self._X[idx]
        new._a = self._a[idx]
        new._y = self._y[idx]
        new._d = self._d[idx]
        new._names = self._names
        for arr in (new._X, new._a, new._y, new._d):
            arr.setflags(write=False)
        return new

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"Dataset(n={self.n}, covariates={list(self._names)})"


@dataclass(frozen=True)
class ColumnSchema:
    """Mapping from CSV column names to dataset roles.

    ``covariates=None`` means every column not mapped to a role is a covariate,
    in file order.
    """

    time: str
    event: str
    treatment: str
    covariates: tuple[str, ...] | None = None


def ingest_csv(path, schema: ColumnSchema) -> Dataset:
    """Read a headered CSV into a :class:`Dataset`.

    Rows are kept in file order.  Missing columns raise :class:`SchemaError`,
    unparseable cells raise :class:`ParseError` naming the offending data row
    (1-based), and invalid values raise :class:`ValidationError`.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        col_index = {name: i for i, name in enumerate(header)}
        for role, name in (("time", schema.time), ("event", schema.event), ("treatment", schema.treatment)):
            if name not in col_index:
                raise SchemaError(f"{path}: missing {role} column {name!r}")
        if schema.covariates is None:
            mapped = {schema.time, schema.event, schema.treatment}
            cov_names = [c for c in header if c not in mapped]
        else:
            cov_names = list(schema.covariates)
            for name in cov_names:
                if name not in col_index:
                    raise SchemaError(f"{path}: missing covariate column {name!r}")
        wanted = [schema.time, schema.event, schema.treatment, *cov_names]
        rows = []
        for rownum, raw in enumerate(reader, start=1):
            if not raw or all(not cell.strip() for cell in raw):
                continue
            parsed = []
            for name in wanted:
                i = col_index[name]
                cell = raw[i].strip() if i < len(raw) else ""
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}: row {rownum}, column {name!r}: cannot parse {cell!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    y, d, a = arr[:, 0], arr[:, 1], arr[:, 2]
    for label, col in (("treatment", a), ("event", d)):
        bad = np.flatnonzero(~np.isin(col, (0.0, 1.0)))
        if bad.size:
            raise ValidationError(
                f"{path}: row {bad[0] + 1}: {label} must be 0 or 1, got {col[bad[0]]}"
            )
    bad = np.flatnonzero(y < 0)
    if bad.size:
        raise ValidationError(f"{path}: row {bad[0] + 1}: negative follow-up {y[bad[0]]}")
    return Dataset(arr[:, 3:], a, y, d, cov_names)


# Formula terms: ("linear", name), ("square", name), ("interaction", a, b).
Term = tuple


@dataclass(frozen=True)
class FormulaSpec:
    """Design-matrix recipe: first-order terms, squares, pairwise products.

    Column order is the intercept (if flagged) followed by ``terms`` in the
    given order.
    """

    terms: tuple[Term, ...]
    intercept: bool = True

    def __post_init__(self):
        seen = set()
        for term in self.terms:
            if term[0] not in ("linear", "square", "interaction") or len(term) != (
                3 if term[0] == "interaction" else 2
            ):
                raise SchemaError(f"malformed term {term!r}")
            if term in seen:
                raise SchemaError(f"duplicate term {term!r}")
            seen.add(term)

    @classmethod
    def parse(cls, text: str, intercept: bool = True) -> "FormulaSpec":
        """Parse a comma list of tokens: ``name``, ``name^2``, ``a:b``."""
        terms = []
        for token in text.split(","):
            token = token.strip()
            if not token:
                continue
            if token.endswith("^2"):
                terms.append(("square", token[:-2]))
            elif ":" in token:
                left, _, right = token.partition(":")
                terms.append(("interaction", left.strip(), right.strip()))
            else:
                terms.append(("linear", token))
        return cls(tuple(terms), intercept=intercept)

    def column_names(self) -> list[str]:
        names = ["(intercept)"] if self.intercept else []
        for term in self.terms:
            if term[0] == "linear":
                names.append(term[1])
            elif term[0] == "square":
                names.append(f"{term[1]}^2")
            else:
                names.append(f"{term[1]}:{term[2]}")
        return names

    def describe(self) -> str:
        return ",".join(self.column_names())


def design_matrix(data: Dataset, spec: FormulaSpec) -> np.ndarray:
    """Build the n x p design matrix for ``spec``, row-aligned with ``data``."""
    index = {name: i for i, name in enumerate(data.covariate_names)}

    def col(name):
        try:
            return data.covariates[:, index[name]]
        except KeyError:
            raise SchemaError(f"unknown covariate {name!r}") from None

    columns = []
    if spec.intercept:
        columns.append(np.ones(data.n))
    for term in spec.terms:
        if term[0] == "linear":
            columns.append(col(term[1]))
        elif term[0] == "square":
            columns.append(col(term[1]) ** 2)
        else:
            columns.append(col(term[1]) * col(term[2]))
    if not columns:
        raise SchemaError("empty design: no intercept and no terms")
    return np.column_stack(columns)
