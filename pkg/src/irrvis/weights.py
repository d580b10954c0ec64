"""Visit weights: selection adjustment, inverse intensity, covariate balance.

Three ingredients:

* ``q_values`` turns a selection function ``phi * S(Y(t))`` into per-visit
  factors ``Q = exp(-phi * S(y))``.  ``phi`` is not estimable from the
  observed data; it is fixed by the caller and varied in sensitivity
  analyses.
* ``mle_weights`` inverts a fitted visit-intensity model:
  ``w = exp(-gamma' z) * Q``, stabilized by the baseline intensity (which
  cancels and never needs to be evaluated).
* ``balancing_weights`` instead solves the empirical balance conditions

      sum_i int h(t) [ W_i dN_i(t) - xi_i(t) dLambda(t) ] = 0

  for ``W = exp(gamma_b' h) Q``, one condition per balance term ``h``.
  The left side is the gradient of the strictly convex function
  ``c(gamma) = (1/n) sum_visits exp(gamma' h) Q - gamma' T / n`` with a
  constant target vector ``T``, so a damped Newton search converges
  globally when a root exists.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .cox import CoxFit, QValues
from .data import Dataset
from .design import ModelMatrixSpec, bind
from .errors import (ConvergenceError, NumericError, RankDeficiencyError,
                     ValidationError)
from .riskset import RiskStructure

__all__ = ["SelectionSpec", "BalanceSpec", "WeightSet", "q_values",
           "mle_weights", "balancing_weights", "balance_report",
           "export_weights"]

_SELECTION_TRANSFORMS = ("identity", "log1p")


@dataclass(frozen=True)
class SelectionSpec:
    """Shape of the outcome term in the selection function.

    ``identity`` uses the outcome itself, suited to continuous responses;
    ``log1p`` uses ``log(1 + y)``, suited to counts.
    """

    transform: str = "identity"

    def __post_init__(self):
        if self.transform not in _SELECTION_TRANSFORMS:
            raise ValidationError(
                f"selection transform must be one of {_SELECTION_TRANSFORMS}, "
                f"got {self.transform!r}")

    def apply(self, y: np.ndarray) -> np.ndarray:
        if self.transform == "identity":
            return np.asarray(y, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if np.any(y <= -1.0):
            raise ValidationError("log1p selection transform needs outcomes > -1")
        return np.log1p(y)


@dataclass(frozen=True)
class BalanceSpec:
    """Balance terms plus solver controls for :func:`balancing_weights`."""

    hspec: ModelMatrixSpec
    tol: float = 1e-8
    max_iter: int = 100
    n_restarts: int = 20

    def __post_init__(self):
        if not self.hspec.has_const():
            raise ValidationError("balance terms must include the constant term 1")


@dataclass(frozen=True)
class WeightSet:
    """Per-visit-row weights of one kind.

    ``weights[i]`` belongs to the i-th visit row in dataset row order and
    already includes the selection factor Q.  ``gamma`` holds the intensity
    coefficients (mle) or the balance coefficients (balancing).  For
    balancing weights the solved residuals and their max-norm are recorded;
    the max-norm is at or below the solver tolerance by construction.
    """

    kind: str
    weights: np.ndarray
    gamma: np.ndarray
    names: tuple
    phi: float
    balance_residuals: Optional[np.ndarray] = None
    max_abs_residual: Optional[float] = None


def q_values(dataset: Dataset, selection: SelectionSpec, phi: float) -> QValues:
    """Selection factors ``exp(-phi * S(y))`` for every visit row."""
    if not np.isfinite(phi):
        raise ValidationError("phi must be finite")
    y = dataset.outcome[dataset.visit_row_indices()]
    with np.errstate(over="ignore"):
        values = np.exp(-float(phi) * selection.apply(y))
    # overflow (or underflow to 0) is a property of this phi, not bad usage
    if values.size and (not np.all(np.isfinite(values)) or np.any(values <= 0.0)):
        raise NumericError(f"selection factors overflow at phi={phi:g}")
    return QValues(phi=float(phi), values=values)


def mle_weights(cox: CoxFit, dataset: Dataset, q: QValues) -> WeightSet:
    """Baseline-stabilized inverse-intensity weights at the fitted model."""
    visit_rows = dataset.visit_row_indices()
    q_arr = q.check(visit_rows.size)
    eta = cox.linear_predictor(dataset, visit_rows)
    return WeightSet(kind="mle", weights=np.exp(-eta) * q_arr,
                     gamma=np.asarray(cox.gamma, dtype=np.float64).copy(),
                     names=tuple(cox.names), phi=q.phi)


def _breslow_pair(breslow, structure: RiskStructure):
    """Accept a CoxFit or an (event_times, increments) pair."""
    if isinstance(breslow, CoxFit):
        times, inc = breslow.event_times, breslow.increments
    else:
        times, inc = breslow
    times = np.asarray(times, dtype=np.float64)
    inc = np.asarray(inc, dtype=np.float64)
    if times.shape != structure.event_times.shape or not np.array_equal(
            times, structure.event_times):
        raise ValidationError(
            "baseline increments do not align with the dataset's event times")
    if np.any(inc < 0.0) or not np.all(np.isfinite(inc)):
        raise ValidationError("baseline increments must be finite and non-negative")
    return inc


class _BalanceSystem:
    """Residual, objective and Jacobian of the balance conditions."""

    def __init__(self, dataset: Dataset, hspec: ModelMatrixSpec, q_arr: np.ndarray,
                 breslow):
        self.rs = RiskStructure(dataset)
        bound = bind(dataset, hspec, "at_risk")
        self.h_visit = bound.evaluate(dataset, self.rs.visit_rows)
        inc = _breslow_pair(breslow, self.rs)
        h_cover = bound.evaluate(dataset, self.rs.cover_row, self.rs.cover_times())
        # target: sum_k dLambda_k * (risk-set sum of h at event k)
        self.target = h_cover.T @ inc[self.rs.cover_event]
        self.q = q_arr
        self.n = self.rs.n

    def weights_at(self, gamma: np.ndarray) -> np.ndarray:
        return np.exp(self.h_visit @ gamma) * self.q

    def residual(self, w: np.ndarray) -> np.ndarray:
        return (self.h_visit.T @ w - self.target) / self.n

    def objective(self, gamma: np.ndarray) -> float:
        with np.errstate(over="ignore"):
            return float((np.exp(self.h_visit @ gamma) @ self.q
                          - gamma @ self.target) / self.n)

    def jacobian(self, w: np.ndarray) -> np.ndarray:
        return (self.h_visit * w[:, None]).T @ self.h_visit / self.n


def _newton_balance(system: _BalanceSystem, start: np.ndarray, tol: float,
                    max_iter: int):
    gamma = start.copy()
    obj = system.objective(gamma)
    if not np.isfinite(obj):
        raise ConvergenceError("balance solve: objective not finite at start")
    for _ in range(max_iter):
        w = system.weights_at(gamma)
        res = system.residual(w)
        if float(np.max(np.abs(res))) <= tol:
            return gamma, w, res
        jac = system.jacobian(w)
        try:
            chol = np.linalg.cholesky(jac)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError(
                "balance solve: singular Jacobian (collinear balance terms)") from None
        step = -np.linalg.solve(chol.T, np.linalg.solve(chol, res))
        accepted = False
        for _ in range(40):
            cand = gamma + step
            cand_obj = system.objective(cand)
            if np.isfinite(cand_obj) and cand_obj <= obj + 1e-14 * (abs(obj) + 1.0):
                accepted = True
                break
            step = step / 2.0
        if not accepted:
            raise ConvergenceError("balance solve: step halving failed")
        gamma, obj = cand, cand_obj
    raise ConvergenceError(f"balance solve: no convergence in {max_iter} iterations")


def balancing_weights(dataset: Dataset, spec: Union[BalanceSpec, ModelMatrixSpec],
                      q: QValues, breslow) -> WeightSet:
    """Solve the balance conditions and return the implied visit weights.

    Parameters
    ----------
    dataset : Dataset
    spec : BalanceSpec or ModelMatrixSpec
        Balance terms; must include the constant term.
    q : QValues
    breslow : CoxFit or (event_times, increments)
        Baseline increments of the visit process, computed with the same q.

    Starts at zero; on failure retries from random starts drawn from a
    fixed internal stream, so results stay deterministic.
    """
    if isinstance(spec, ModelMatrixSpec):
        spec = BalanceSpec(hspec=spec)
    q_arr = q.check(int(dataset.visit.sum()))
    system = _BalanceSystem(dataset, spec.hspec, q_arr, breslow)
    # a non-constant term that never varies at visit rows duplicates the
    # intercept direction and makes the Jacobian singular; drop it
    names = list(spec.hspec.names)
    const_j = next(j for j, t in enumerate(spec.hspec.terms) if t.kind == "const")
    keep = np.ptp(system.h_visit, axis=0) > 0.0
    keep[const_j] = True
    if not keep.all():
        dropped = [n for n, k in zip(names, keep) if not k]
        warnings.warn("balance terms constant at every visit row dropped: "
                      + ", ".join(dropped))
        system.h_visit = system.h_visit[:, keep]
        system.target = system.target[keep]
        names = [n for n, k in zip(names, keep) if k]
    p = len(names)
    starts = [np.zeros(p)]
    rng = np.random.Generator(np.random.Philox(key=np.array([2166136261, 0],
                                                            dtype=np.uint64)))
    starts.extend(rng.uniform(-0.5, 0.5, size=p) for _ in range(spec.n_restarts))
    last_error: Optional[Exception] = None
    for start in starts:
        try:
            gamma, w, res = _newton_balance(system, start, spec.tol, spec.max_iter)
        except RankDeficiencyError:
            raise
        except (ConvergenceError, NumericError) as exc:
            last_error = exc
            continue
        return WeightSet(kind="balancing", weights=w, gamma=gamma,
                         names=tuple(names), phi=q.phi,
                         balance_residuals=res,
                         max_abs_residual=float(np.max(np.abs(res))))
    raise ConvergenceError(
        f"balance solve: failed from {len(starts)} starts: {last_error}")


def balance_report(dataset: Dataset, hspec: ModelMatrixSpec, weights, breslow,
                   q: Optional[QValues] = None) -> list:
    """Evaluate the balance conditions under arbitrary weights.

    ``weights`` is a :class:`WeightSet` or an array with one entry per
    visit row.  Arrays are taken as complete weights; when ``q`` is given
    the array is treated as the selection-free factor and multiplied by Q.

    Returns a list of dicts with keys ``term``, ``residual``,
    ``standardized_residual`` and ``zero_sd``.  Residuals are standardized
    by the term's standard deviation over at-risk rows; a term with zero
    spread (the constant, for one) is flagged and left unstandardized.
    """
    if isinstance(weights, WeightSet):
        w = np.asarray(weights.weights, dtype=np.float64)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if q is not None:
            w = w * q.check(w.shape[0])
    if w.shape[0] != int(dataset.visit.sum()):
        raise ValidationError("weights must have one entry per visit row")
    if np.any(w <= 0.0) or not np.all(np.isfinite(w)):
        raise ValidationError("weights must be positive and finite")
    system = _BalanceSystem(dataset, hspec, np.ones_like(w), breslow)
    res = system.residual(w)
    bound = bind(dataset, hspec, "at_risk")
    risk_rows = dataset.at_risk_row_indices()
    h_risk = bound.evaluate(dataset, risk_rows)
    rows = []
    for j, term in enumerate(hspec.names):
        sd = float(h_risk[:, j].std(ddof=1)) if h_risk.shape[0] > 1 else 0.0
        zero = sd == 0.0
        rows.append({
            "term": term,
            "residual": float(res[j]),
            "standardized_residual": float(res[j]) if zero else float(res[j] / sd),
            "zero_sd": zero,
        })
    return rows


def export_weights(dataset: Dataset, ws: WeightSet, path) -> None:
    """Write per-visit weights as CSV: patient_id, visit_time, weight, kind."""
    import csv

    visit_rows = dataset.visit_row_indices()
    if ws.weights.shape[0] != visit_rows.size:
        raise ValidationError("weight set does not match the dataset")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "visit_time", "weight", "kind"])
        for i, row in enumerate(visit_rows):
            writer.writerow([
                dataset.patient_ids[dataset.patient_index[row]],
                repr(float(dataset.end[row])),
                repr(float(ws.weights[i])),
                ws.kind,
            ])
