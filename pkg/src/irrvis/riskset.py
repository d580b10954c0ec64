"""Risk-set bookkeeping for recurrent visit processes.

An at-risk row ``(start, end]`` covers every distinct visit time ``s`` with
``start < s <= end``.  The (row, event) incidence pairs are materialized
once per dataset; every sum over risk sets is then a segmented reduction
over the pairs with ``numpy.bincount``, which accumulates in a fixed order.
All sums of positive quantities, so results are exact to float64 rounding
and reproducible run to run.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .errors import NumericError, ValidationError

__all__ = ["RiskStructure"]


class RiskStructure:
    """Incidence pairs between at-risk rows and pooled event times.

    Attributes
    ----------
    event_times : ndarray, shape (K,)
        Distinct visit times, ascending.  Ties are pooled.
    cover_row : ndarray of int64, shape (M,)
        Dataset row index of each incidence pair.
    cover_event : ndarray of int64, shape (M,)
        Event index of each pair.
    visit_rows : ndarray of int64, shape (V,)
        Dataset row indices with a visit, ascending.
    visit_event : ndarray of int64, shape (V,)
        Event index of each visit row.
    n : int
        Number of patients; sums are reported divided by ``n``.
    """

    def __init__(self, dataset: Dataset):
        self.n = dataset.n_patients
        self.event_times = dataset.event_times()
        if self.event_times.size == 0:
            raise ValidationError("dataset has no visits")
        self.K = int(self.event_times.size)
        risk_rows = dataset.at_risk_row_indices()
        lo = np.searchsorted(self.event_times, dataset.start[risk_rows], side="right")
        hi = np.searchsorted(self.event_times, dataset.end[risk_rows], side="right")
        counts = hi - lo
        keep = counts > 0
        risk_rows, lo, counts = risk_rows[keep], lo[keep], counts[keep]
        self.cover_row = np.repeat(risk_rows, counts)
        # concatenated ranges lo[i] .. lo[i]+counts[i]
        ends = np.cumsum(counts)
        offsets = np.arange(ends[-1]) - np.repeat(ends - counts, counts)
        self.cover_event = np.repeat(lo, counts) + offsets
        self.visit_rows = dataset.visit_row_indices()
        self.visit_event = np.searchsorted(self.event_times, dataset.end[self.visit_rows])

    def cover_times(self) -> np.ndarray:
        """Event time of each incidence pair."""
        return self.event_times[self.cover_event]

    def event_sum(self, values: np.ndarray) -> np.ndarray:
        """Sum ``values`` (one per incidence pair) within each event time."""
        return np.bincount(self.cover_event, weights=values, minlength=self.K)

    def event_sum_columns(self, weights: np.ndarray, columns: np.ndarray) -> np.ndarray:
        """Per-event sums of ``weights * columns[:, j]``, shape (K, p)."""
        p = columns.shape[1]
        out = np.empty((self.K, p))
        for j in range(p):
            out[:, j] = np.bincount(self.cover_event,
                                    weights=weights * columns[:, j],
                                    minlength=self.K)
        return out

    def pooled_visit_sum(self, values: np.ndarray) -> np.ndarray:
        """Sum per-visit ``values`` within each event time (tie pooling)."""
        return np.bincount(self.visit_event, weights=values, minlength=self.K)

    @staticmethod
    def check_positive(s0: np.ndarray) -> None:
        if np.any(s0 <= 0.0) or not np.all(np.isfinite(s0)):
            raise NumericError(
                "risk-set sum is zero or non-finite at an event time; "
                "check at_risk flags and covariate scale")
