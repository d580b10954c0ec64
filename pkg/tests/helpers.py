"""Builders for the small synthetic datasets used across the test suite."""

import numpy as np

from irrvis import CountingProcessRow, Dataset


def grid_rows(pid, cov, visits, n_periods=4, step=1.0, censored_from=None):
    """Rows for one patient on a unit grid.

    ``visits`` maps the period number (1-based, the interval ending at
    ``k * step``) to the outcome observed there.  ``censored_from`` turns
    ``at_risk`` off for periods >= that number.
    """
    rows = []
    for k in range(1, n_periods + 1):
        risk = censored_from is None or k < censored_from
        visit = risk and k in visits
        rows.append(CountingProcessRow(pid, (k - 1) * step, k * step, risk,
                                       visit, visits[k] if visit else None,
                                       dict(cov)))
    return rows


def two_patient_rows():
    rows = grid_rows("a", {"z": 1.0}, {1: 2.5, 3: 1.0}, n_periods=4)
    rows += grid_rows("b", {"z": -0.5}, {2: 0.0}, n_periods=4, censored_from=4)
    return rows


def two_patient_dataset():
    return Dataset.from_rows(two_patient_rows(), tau=4.0)


def random_panel(seed, n_patients=6, n_periods=5, p_visit=0.5, n_cov=1,
                 outcome_sd=1.0, outcome_shift=0.0):
    """Random dataset on a unit grid; covariates constant per patient.

    Retries with a shifted seed until at least one visit lands, so the
    result is deterministic and always usable by the fitting code.
    """
    for attempt in range(100):
        rng = np.random.default_rng(seed + 7919 * attempt)
        rows = []
        n_visits = 0
        for pid in range(n_patients):
            cov = {f"z{j + 1}": float(rng.normal()) for j in range(n_cov)}
            for k in range(n_periods):
                visit = bool(rng.random() < p_visit)
                n_visits += visit
                y = float(outcome_shift + rng.normal(0.0, outcome_sd)) if visit else None
                rows.append(CountingProcessRow(f"p{pid}", float(k), float(k + 1),
                                               True, visit, y, cov))
        if n_visits:
            return Dataset.from_rows(rows, tau=float(n_periods))
    raise AssertionError("could not build a panel with visits")
