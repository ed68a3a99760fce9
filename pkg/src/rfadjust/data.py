"""Two-arm trial data: validation, CSV ingestion, randomization."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "TrialDataset",
    "ResidualVector",
    "RESIDUAL_SOURCES",
    "DataValidationError",
    "CSVParseError",
    "adjusted_response",
    "load_trial_csv",
    "complete_randomization",
]

RESIDUAL_SOURCES = ("oob-forest", "insample-forest", "ols", "none")


class DataValidationError(ValueError):
    """Input data violates a structural requirement of the analysis."""


class CSVParseError(DataValidationError):
    """A CSV cell could not be read; carries the 1-based row and column name."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


def _frozen(a, dtype):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Covariates ``X`` (n x p), outcomes ``R`` and 0/1 assignment ``Z``.

    Arrays are copied and made read-only on construction.
    """

    covariates: np.ndarray
    outcomes: np.ndarray
    assignment: np.ndarray
    covariate_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        X = np.asarray(self.covariates, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        R = np.asarray(self.outcomes, dtype=np.float64)
        Z = np.asarray(self.assignment)
        if X.ndim != 2:
            raise DataValidationError(f"covariates must be a matrix, got shape {X.shape}")
        if R.ndim != 1 or Z.ndim != 1:
            raise DataValidationError("outcomes and assignment must be vectors")
        n = R.shape[0]
        if X.shape[0] != n or Z.shape[0] != n:
            raise DataValidationError(
                f"length mismatch: covariates {X.shape[0]}, outcomes {n}, "
                f"assignment {Z.shape[0]}")
        if n < 4:
            raise DataValidationError(f"need at least 4 subjects, got {n}")
        if not np.all(np.isfinite(X)):
            raise DataValidationError("covariates contain missing or non-finite values")
        if not np.all(np.isfinite(R)):
            raise DataValidationError("outcomes contain missing or non-finite values")
        Zf = np.asarray(Z, dtype=np.float64)
        if not np.all((Zf == 0) | (Zf == 1)):
            bad = np.unique(Zf[(Zf != 0) & (Zf != 1)])
            raise DataValidationError(f"assignment must be 0/1, found {bad.tolist()}")
        Z = Zf.astype(np.int8)
        n1 = int(Z.sum())
        if n1 == 0 or n1 == n:
            raise DataValidationError("both arms must be nonempty")
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataValidationError("covariate_names does not match covariate columns")
        object.__setattr__(self, "covariates", _frozen(X, np.float64))
        object.__setattr__(self, "outcomes", _frozen(R, np.float64))
        object.__setattr__(self, "assignment", _frozen(Z, np.int8))
        object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.outcomes.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def n1(self) -> int:
        return int(self.assignment.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    def require_testable(self):
        if self.n1 < 2 or self.n0 < 2:
            raise DataValidationError(
                f"tests need at least 2 subjects per arm (n1={self.n1}, n0={self.n0})")

    def with_assignment(self, assignment) -> "TrialDataset":
        return TrialDataset(self.covariates, self.outcomes, assignment, self.covariate_names)

    def with_outcomes(self, outcomes) -> "TrialDataset":
        return TrialDataset(self.covariates, outcomes, self.assignment, self.covariate_names)


@dataclass(frozen=True, eq=False)
class ResidualVector:
    """Residuals ``e = Y - g(X)`` and how ``g`` was evaluated."""

    values: np.ndarray
    source: str
    degenerate: bool = False

    def __post_init__(self):
        if self.source not in RESIDUAL_SOURCES:
            raise ValueError(f"unknown residual source {self.source!r}")
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("residuals must be a finite vector")
        object.__setattr__(self, "values", _frozen(v, np.float64))

    def __len__(self):
        return self.values.shape[0]


def adjusted_response(dataset: TrialDataset, tau0: float) -> np.ndarray:
    """``Y = R - tau0 * Z``; equals the observed outcomes when ``tau0 == 0``."""
    tau0 = float(tau0)
    if not math.isfinite(tau0):
        raise ValueError(f"tau0 must be finite, got {tau0}")
    if tau0 == 0.0:
        return dataset.outcomes.copy()
    return dataset.outcomes - tau0 * dataset.assignment


def load_trial_csv(path, outcome_column: str, assignment_column: str) -> TrialDataset:
    """Read a trial from CSV; every other column becomes a numeric covariate.

    Rows are numbered as in a spreadsheet (header is row 1).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVParseError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        for col in (outcome_column, assignment_column):
            if col not in header:
                raise CSVParseError(f"{path}: column {col!r} not found in header {header}",
                                    row=1, column=col)
        if outcome_column == assignment_column:
            raise DataValidationError("outcome and assignment columns must differ")
        if len(set(header)) != len(header):
            raise CSVParseError(f"{path}: duplicate column names in header", row=1)
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise CSVParseError(
                    f"{path}: row {lineno} has {len(raw)} fields, expected {len(header)}",
                    row=lineno)
            values = []
            for name, cell in zip(header, raw):
                cell = cell.strip()
                if cell == "":
                    raise CSVParseError(f"{path}: missing value at row {lineno}, column {name!r}",
                                        row=lineno, column=name)
                try:
                    v = float(cell)
                except ValueError:
                    raise CSVParseError(
                        f"{path}: non-numeric value {cell!r} at row {lineno}, column {name!r}",
                        row=lineno, column=name) from None
                if not math.isfinite(v):
                    raise CSVParseError(
                        f"{path}: non-finite value {cell!r} at row {lineno}, column {name!r}",
                        row=lineno, column=name)
                values.append(v)
            rows.append(values)
    if not rows:
        raise DataValidationError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    yi = header.index(outcome_column)
    zi = header.index(assignment_column)
    cov_idx = [j for j in range(len(header)) if j not in (yi, zi)]
    z = table[:, zi]
    bad = np.flatnonzero((z != 0) & (z != 1))
    if bad.size:
        raise DataValidationError(
            f"{path}: assignment column {assignment_column!r} must be 0/1; "
            f"row {bad[0] + 2} has {z[bad[0]]:g}")
    if not cov_idx:
        raise DataValidationError(f"{path}: no covariate columns")
    return TrialDataset(table[:, cov_idx], table[:, yi], z,
                        tuple(header[j] for j in cov_idx))


def complete_randomization(n: int, n1: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random 0/1 vector of length ``n`` with exactly ``n1`` ones."""
    n, n1 = int(n), int(n1)
    if not 0 < n1 < n:
        raise ValueError(f"need 0 < n1 < n, got n={n}, n1={n1}")
    z = np.zeros(n, dtype=np.int8)
    z[rng.permutation(n)[:n1]] = 1
    return z
