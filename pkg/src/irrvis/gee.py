"""Weighted estimating equations for the marginal outcome model.

Visits are the analysis rows: the marginal mean ``g(mu) = x' beta`` is fit
by solving

    sum_visits w * (d mu / d eta) * x * (y - mu) / v(mu) = 0

with an independence working correlation, one term per visit row.  The
weights carry the visit-process correction; the equations are homogeneous
in them, so their scale is irrelevant.

Identity link with constant variance reduces to weighted least squares and
is solved in closed form.  Other combinations use Fisher scoring with step
halving on the equation norm.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .design import ModelMatrixSpec, bind
from .errors import (ConvergenceError, NumericError, RankDeficiencyError,
                     ValidationError)

__all__ = ["MarginalModelSpec", "GeeFit", "fit_weighted_gee", "estimate_dispersion"]

_LINKS = ("identity", "log")
_VARIANCES = ("constant", "poisson", "negative_binomial")


@dataclass(frozen=True)
class MarginalModelSpec:
    """Marginal mean model: design terms, link and working variance."""

    xspec: ModelMatrixSpec
    link: str = "identity"
    variance: str = "constant"
    theta: Optional[float] = None

    def __post_init__(self):
        if self.link not in _LINKS:
            raise ValidationError(f"link must be one of {_LINKS}")
        if self.variance not in _VARIANCES:
            raise ValidationError(f"variance must be one of {_VARIANCES}")
        if self.variance == "negative_binomial":
            if self.theta is None or not self.theta >= 0.0:
                raise ValidationError(
                    "negative_binomial variance needs a dispersion theta >= 0")
        elif self.theta is not None:
            raise ValidationError("theta only applies to negative_binomial variance")


@dataclass(frozen=True)
class GeeFit:
    """Result of :func:`fit_weighted_gee`."""

    beta: np.ndarray
    names: tuple
    link: str
    variance: str
    n_iter: int
    converged: bool
    max_eq_norm: float
    fitted_means: np.ndarray


def _prepare(dataset: Dataset, model: MarginalModelSpec, weights):
    visit_rows = dataset.visit_row_indices()
    if visit_rows.size == 0:
        raise ValidationError("dataset has no visit rows to fit on")
    bound = bind(dataset, model.xspec, "visits")
    x = bound.evaluate(dataset, visit_rows)
    y = dataset.outcome[visit_rows]
    if weights is None:
        w = np.ones(visit_rows.size)
    else:
        w = np.asarray(getattr(weights, "weights", weights), dtype=np.float64)
        if w.shape != (visit_rows.size,):
            raise ValidationError("weights must have one entry per visit row")
        if np.any(w < 0.0) or not np.all(np.isfinite(w)):
            raise ValidationError("weights must be non-negative and finite")
        if not np.any(w > 0.0):
            raise ValidationError("all weights are zero")
    return x, y, w


def _variance_fn(model: MarginalModelSpec, mu: np.ndarray) -> np.ndarray:
    if model.variance == "constant":
        return np.ones_like(mu)
    if model.variance == "poisson":
        return mu
    return mu + model.theta * mu * mu


def _solve_psd(a: np.ndarray, b: np.ndarray, context: str) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError(f"{context}: design is rank deficient") from None
    return np.linalg.solve(chol.T, np.linalg.solve(chol, b))


def fit_weighted_gee(dataset: Dataset, model: MarginalModelSpec, weights=None,
                     max_iter: int = 200, tol: float = 1e-8) -> GeeFit:
    """Fit the marginal model on visit rows with the given visit weights.

    ``weights`` may be a :class:`~irrvis.weights.WeightSet` or a plain
    array, one entry per visit row; defaults to ones.  Convergence is
    declared when the patient-normalized estimating equation max-norm
    reaches ``tol``.
    """
    x, y, w = _prepare(dataset, model, weights)
    n = dataset.n_patients
    names = tuple(model.xspec.names)

    if model.link == "identity" and model.variance == "constant":
        xtw = x.T * w
        beta = _solve_psd(xtw @ x, xtw @ y, "least squares")
        mu = x @ beta
        norm = float(np.max(np.abs(x.T @ (w * (y - mu)) / n)))
        return GeeFit(beta, names, model.link, model.variance, 1, True, norm, mu)

    def mean_and_slope(eta):
        if model.link == "identity":
            return eta, np.ones_like(eta)
        with np.errstate(over="raise"):
            mu = np.exp(eta)
        return mu, mu

    def equation(beta):
        eta = x @ beta
        mu, slope = mean_and_slope(eta)
        v = _variance_fn(model, mu)
        if np.any(v <= 0.0):
            raise NumericError("working variance hit zero; outcome may be degenerate")
        r = w * slope * (y - mu) / v
        u = x.T @ r / n
        info = (x.T * (w * slope * slope / v)) @ x / n
        return u, info

    beta = np.zeros(len(model.xspec))
    if model.link == "log":
        ybar = float(w @ y) / float(w.sum())
        if ybar <= 0.0:
            raise NumericError("log link needs a positive weighted outcome mean")
        if model.xspec.has_const():
            j = [t.kind for t in model.xspec.terms].index("const")
            beta[j] = np.log(ybar)

    u, info = equation(beta)
    norm = float(np.max(np.abs(u)))
    n_iter = 0
    while norm > tol:
        if n_iter >= max_iter:
            raise ConvergenceError(
                f"marginal fit: no convergence in {max_iter} iterations "
                f"(equation max-norm {norm:.3g})")
        step = _solve_psd(info, u, "marginal fit")
        accepted = False
        for _ in range(30):
            cand = beta + step
            try:
                cand_u, cand_info = equation(cand)
                cand_norm = float(np.max(np.abs(cand_u)))
            except (FloatingPointError, NumericError):
                cand_norm = np.inf
            if np.isfinite(cand_norm) and cand_norm < norm:
                accepted = True
                break
            step = step / 2.0
        if not accepted:
            raise ConvergenceError("marginal fit: step halving failed")
        beta, u, info, norm = cand, cand_u, cand_info, cand_norm
        n_iter += 1

    eta = x @ beta
    mu = np.exp(eta) if model.link == "log" else eta
    return GeeFit(beta, names, model.link, model.variance, max(n_iter, 1), True,
                  norm, mu)


def estimate_dispersion(fit: GeeFit, dataset: Dataset, weights=None) -> float:
    """Moment estimate of the negative-binomial dispersion.

    Solves ``sum w [(y - mu)^2 - mu] = theta * sum w mu^2`` at the fitted
    means and floors the result at zero.
    """
    visit_rows = dataset.visit_row_indices()
    y = dataset.outcome[visit_rows]
    mu = fit.fitted_means
    if mu.shape != y.shape:
        raise ValidationError("fit does not match the dataset's visit rows")
    if weights is None:
        w = np.ones_like(y)
    else:
        w = np.asarray(getattr(weights, "weights", weights), dtype=np.float64)
    num = float(w @ ((y - mu) ** 2 - mu))
    den = float(w @ (mu * mu))
    if den <= 0.0:
        raise NumericError("dispersion estimate undefined: zero fitted means")
    return max(0.0, num / den)
