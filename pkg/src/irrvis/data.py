"""Counting-process data model.

Longitudinal data with irregular visit times are stored one interval per
row.  A row covers the half-open interval ``(start, end]`` for one patient;
``visit`` marks whether the patient was observed at ``end``, and ``outcome``
is the response measured at that visit (absent between visits).  ``at_risk``
says whether the patient can still produce visits on the interval; once a
patient is censored the flag stays off.

The :class:`Dataset` container keeps rows grouped by patient in
structure-of-arrays form, which is what the fitting routines consume.
:class:`CountingProcessRow` is the row-level view used at the boundaries.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

from .errors import ValidationError

__all__ = ["CountingProcessRow", "Dataset", "load_csv", "export_csv"]

# fixed boundary schema: these six columns, then covariates in declared order
STRUCTURAL_COLUMNS = ("patient_id", "start", "end", "at_risk", "visit", "outcome")


@dataclass(frozen=True)
class CountingProcessRow:
    """One at-risk interval ``(start, end]`` of one patient."""

    patient_id: object
    start: float
    end: float
    at_risk: bool
    visit: bool
    outcome: Optional[float]
    covariates: Mapping[str, float]


class Dataset:
    """Rows of a visit process, grouped by patient.

    Attributes
    ----------
    patient_ids : list
        One label per patient, in order of first appearance.
    patient_index : ndarray of int32
        Per-row patient position (0-based into ``patient_ids``).
    start, end : ndarray of float64
    at_risk, visit : ndarray of bool
    outcome : ndarray of float64
        NaN on rows without a visit.
    covariates : ndarray of float64, shape (n_rows, n_covariates)
    covariate_names : tuple of str
    tau : float
        Administrative end of follow-up.

    Arrays are shared, not copied; treat a Dataset as immutable.
    """

    def __init__(self, patient_ids, patient_index, start, end, at_risk, visit,
                 outcome, covariates, covariate_names, tau, validate=True):
        self.patient_ids = list(patient_ids)
        self.patient_index = np.asarray(patient_index, dtype=np.int32)
        self.start = np.asarray(start, dtype=np.float64)
        self.end = np.asarray(end, dtype=np.float64)
        self.at_risk = np.asarray(at_risk, dtype=bool)
        self.visit = np.asarray(visit, dtype=bool)
        self.outcome = np.asarray(outcome, dtype=np.float64)
        self.covariates = np.ascontiguousarray(covariates, dtype=np.float64)
        if self.covariates.ndim != 2:
            raise ValidationError("covariates must be a 2-d array")
        self.covariate_names = tuple(covariate_names)
        self.tau = float(tau)
        self._row_bounds = None
        if validate:
            self._validate()

    # -- construction ------------------------------------------------------

    @classmethod
    def from_rows(cls, rows: Sequence[CountingProcessRow], tau: Optional[float] = None) -> "Dataset":
        """Build a dataset from row objects, grouping by patient id."""
        if not rows:
            raise ValidationError("dataset has no rows")
        names = tuple(rows[0].covariates.keys())
        ids: list = []
        id_pos: dict = {}
        pidx = np.empty(len(rows), dtype=np.int32)
        start = np.empty(len(rows))
        end = np.empty(len(rows))
        at_risk = np.empty(len(rows), dtype=bool)
        visit = np.empty(len(rows), dtype=bool)
        outcome = np.full(len(rows), np.nan)
        cov = np.empty((len(rows), len(names)))
        for i, r in enumerate(rows):
            if tuple(r.covariates.keys()) != names:
                raise ValidationError(f"row {i}: covariate names differ from first row")
            if r.patient_id not in id_pos:
                id_pos[r.patient_id] = len(ids)
                ids.append(r.patient_id)
            pidx[i] = id_pos[r.patient_id]
            start[i] = r.start
            end[i] = r.end
            at_risk[i] = r.at_risk
            visit[i] = r.visit
            if r.outcome is not None:
                outcome[i] = r.outcome
            cov[i] = [r.covariates[k] for k in names]
        if tau is None:
            tau = float(end.max())
        order = np.lexsort((start, pidx))
        return cls(ids, pidx[order], start[order], end[order], at_risk[order],
                   visit[order], outcome[order], cov[order], names, tau)

    # -- validation --------------------------------------------------------

    def _validate(self) -> None:
        n_rows = self.patient_index.shape[0]
        if n_rows == 0:
            raise ValidationError("dataset has no rows")
        for arr, name in ((self.start, "start"), (self.end, "end"),
                          (self.visit, "visit"), (self.at_risk, "at_risk"),
                          (self.outcome, "outcome")):
            if arr.shape[0] != n_rows:
                raise ValidationError(f"column {name!r} has wrong length")
        if self.covariates.shape[0] != n_rows:
            raise ValidationError("covariate matrix has wrong number of rows")
        if self.covariates.shape[1] != len(self.covariate_names):
            raise ValidationError("covariate matrix width does not match names")
        if not np.isfinite(self.start).all() or not np.isfinite(self.end).all():
            raise ValidationError("non-finite interval endpoint")
        if not np.isfinite(self.covariates).all():
            raise ValidationError("non-finite covariate value")
        if np.any(self.start < 0):
            raise ValidationError("negative interval start")
        if np.any(self.end <= self.start):
            raise ValidationError("interval with end <= start")
        if np.any(self.end > self.tau + 1e-12):
            raise ValidationError("interval extends past tau")
        if np.any(self.visit & ~self.at_risk):
            raise ValidationError("visit recorded on a row that is not at risk")
        has_outcome = np.isfinite(self.outcome)
        if np.any(self.visit & ~has_outcome):
            i = int(np.flatnonzero(self.visit & ~has_outcome)[0])
            raise ValidationError(f"missing outcome on visit row {i}")
        if np.any(~self.visit & has_outcome):
            i = int(np.flatnonzero(~self.visit & has_outcome)[0])
            raise ValidationError(f"outcome present on non-visit row {i}")
        # per-patient structure: contiguous partition starting at 0,
        # at-risk before censored rows
        bounds = self.patient_row_bounds
        if int(self.patient_index.max()) + 1 != len(self.patient_ids):
            raise ValidationError("patient_index does not match patient_ids")
        for k in range(len(self.patient_ids)):
            lo, hi = bounds[k], bounds[k + 1]
            if hi <= lo:
                raise ValidationError(f"patient {self.patient_ids[k]!r} has no rows")
            s, e = self.start[lo:hi], self.end[lo:hi]
            if s[0] != 0.0:
                raise ValidationError(
                    f"patient {self.patient_ids[k]!r}: first interval must start at 0")
            if hi - lo > 1 and not np.array_equal(s[1:], e[:-1]):
                raise ValidationError(
                    f"patient {self.patient_ids[k]!r}: intervals overlap or leave gaps")
            a = self.at_risk[lo:hi]
            if np.any(a[1:] & ~a[:-1]):
                raise ValidationError(
                    f"patient {self.patient_ids[k]!r}: at_risk turns back on after censoring")

    @property
    def patient_row_bounds(self) -> np.ndarray:
        """CSR-style bounds: rows of patient ``k`` are ``[bounds[k], bounds[k+1])``.

        Requires rows grouped by patient in ``patient_ids`` order, which the
        constructors guarantee.
        """
        if self._row_bounds is None:
            pidx = self.patient_index
            if np.any(np.diff(pidx) < 0):
                raise ValidationError("rows are not grouped by patient")
            counts = np.bincount(pidx, minlength=len(self.patient_ids))
            self._row_bounds = np.concatenate(([0], np.cumsum(counts)))
        return self._row_bounds

    # -- views -------------------------------------------------------------

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def n_rows(self) -> int:
        return int(self.patient_index.shape[0])

    def visit_row_indices(self) -> np.ndarray:
        return np.flatnonzero(self.visit)

    def at_risk_row_indices(self) -> np.ndarray:
        return np.flatnonzero(self.at_risk)

    def event_times(self) -> np.ndarray:
        """Distinct visit times, ascending (ties pooled)."""
        return np.unique(self.end[self.visit])

    def covariate_column(self, name: str) -> np.ndarray:
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise ValidationError(f"unknown covariate {name!r}") from None
        return self.covariates[:, j]

    def rows(self) -> Iterator[CountingProcessRow]:
        """Iterate rows as :class:`CountingProcessRow` objects."""
        for i in range(self.n_rows):
            yield CountingProcessRow(
                patient_id=self.patient_ids[self.patient_index[i]],
                start=float(self.start[i]),
                end=float(self.end[i]),
                at_risk=bool(self.at_risk[i]),
                visit=bool(self.visit[i]),
                outcome=float(self.outcome[i]) if self.visit[i] else None,
                covariates={k: float(v) for k, v in
                            zip(self.covariate_names, self.covariates[i])},
            )

    def take_patients(self, indices: Sequence[int]) -> "Dataset":
        """New dataset containing the given patients, in the given order.

        Indices may repeat (bootstrap resampling); each occurrence becomes a
        distinct patient with a fresh integer label.
        """
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size == 0:
            raise ValidationError("cannot build a dataset with no patients")
        if indices.min() < 0 or indices.max() >= self.n_patients:
            raise ValidationError("patient index out of range")
        bounds = self.patient_row_bounds
        pieces = [np.arange(bounds[i], bounds[i + 1]) for i in indices]
        rows = np.concatenate(pieces)
        counts = np.array([len(p) for p in pieces])
        pidx = np.repeat(np.arange(len(indices), dtype=np.int32), counts)
        return Dataset(list(range(len(indices))), pidx, self.start[rows],
                       self.end[rows], self.at_risk[rows], self.visit[rows],
                       self.outcome[rows], self.covariates[rows],
                       self.covariate_names, self.tau, validate=False)


# -- CSV boundary ----------------------------------------------------------


def _parse_bool(text: str, column: str, line: int) -> bool:
    if text == "0":
        return False
    if text == "1":
        return True
    raise ValidationError(f"line {line}: column {column!r} must be 0 or 1, got {text!r}")


def _parse_float(text: str, column: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(
            f"line {line}: column {column!r} has non-numeric value {text!r}") from None
    if not math.isfinite(value):
        raise ValidationError(f"line {line}: column {column!r} is not finite")
    return value


def load_csv(path, schema: Optional[Mapping[str, str]] = None) -> Dataset:
    """Read a dataset from CSV.

    Parameters
    ----------
    path : str or path-like
    schema : mapping, optional
        Maps the six structural field names (``patient_id``, ``start``,
        ``end``, ``at_risk``, ``visit``, ``outcome``) to the column names
        used in the file.  Unmapped fields keep their canonical name.
        Every remaining column is treated as a covariate, in file order.

    Booleans must be literally ``0`` or ``1``; the outcome cell must be
    empty on rows without a visit.
    """
    colmap = dict.fromkeys(STRUCTURAL_COLUMNS)
    for k in STRUCTURAL_COLUMNS:
        colmap[k] = k
    if schema is not None:
        for key, col in schema.items():
            if key not in STRUCTURAL_COLUMNS:
                raise ValidationError(f"schema maps unknown field {key!r}")
            colmap[key] = col
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError("empty file: missing header row") from None
        if len(set(header)) != len(header):
            raise ValidationError("duplicate column names in header")
        positions = {}
        for key in STRUCTURAL_COLUMNS:
            if colmap[key] not in header:
                raise ValidationError(f"missing required column {colmap[key]!r}")
            positions[key] = header.index(colmap[key])
        structural = set(positions.values())
        cov_cols = [(name, j) for j, name in enumerate(header) if j not in structural]
        names = tuple(name for name, _ in cov_cols)

        ids: list = []
        id_pos: dict = {}
        pidx_l, start_l, end_l, risk_l, visit_l, out_l, cov_l = [], [], [], [], [], [], []
        for line, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise ValidationError(f"line {line}: expected {len(header)} cells, got {len(rec)}")
            pid = rec[positions["patient_id"]]
            if pid not in id_pos:
                id_pos[pid] = len(ids)
                ids.append(pid)
            pidx_l.append(id_pos[pid])
            start_l.append(_parse_float(rec[positions["start"]], colmap["start"], line))
            end_l.append(_parse_float(rec[positions["end"]], colmap["end"], line))
            risk_l.append(_parse_bool(rec[positions["at_risk"]], colmap["at_risk"], line))
            is_visit = _parse_bool(rec[positions["visit"]], colmap["visit"], line)
            visit_l.append(is_visit)
            cell = rec[positions["outcome"]].strip()
            if cell == "":
                out_l.append(np.nan)
            else:
                out_l.append(_parse_float(cell, colmap["outcome"], line))
            cov_l.append([_parse_float(rec[j], name, line) for name, j in cov_cols])
    if not pidx_l:
        raise ValidationError("file has a header but no data rows")
    pidx = np.array(pidx_l, dtype=np.int32)
    start = np.array(start_l)
    cov = np.array(cov_l, dtype=np.float64).reshape(len(pidx_l), len(names))
    order = np.lexsort((start, pidx))
    return Dataset(ids, pidx[order], start[order], np.array(end_l)[order],
                   np.array(risk_l, dtype=bool)[order],
                   np.array(visit_l, dtype=bool)[order],
                   np.array(out_l)[order], cov[order], names,
                   tau=float(np.max(end_l)))


def _format_float(x: float) -> str:
    # repr gives the shortest string that round-trips, so exports are
    # byte-stable across runs
    return repr(float(x))


def export_csv(dataset: Dataset, path) -> None:
    """Write a dataset to CSV in the fixed boundary column order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(STRUCTURAL_COLUMNS) + list(dataset.covariate_names))
        for i in range(dataset.n_rows):
            writer.writerow([
                dataset.patient_ids[dataset.patient_index[i]],
                _format_float(dataset.start[i]),
                _format_float(dataset.end[i]),
                "1" if dataset.at_risk[i] else "0",
                "1" if dataset.visit[i] else "0",
                _format_float(dataset.outcome[i]) if dataset.visit[i] else "",
                *(_format_float(v) for v in dataset.covariates[i]),
            ])
