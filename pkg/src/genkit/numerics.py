"""
Regression and linear-algebra engine.

Weighted least squares with model-based or HC1 sandwich covariance, logistic
regression by iteratively reweighted least squares, natural cubic spline
bases, and bivariate normal sampling. All solves go through a column-pivoted
QR factorisation so rank deficiency is detected rather than papered over.
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg, special, stats
from scipy.interpolate import BSpline

from .errors import (
    ConvergenceWarning,
    DegenerateInputError,
    SeparationWarning,
    SingularDesignError,
    ValidationError,
)

MODEL_BASED = "model-based"
SANDWICH = "sandwich"
COVARIANCE_KINDS = (MODEL_BASED, SANDWICH)

# |coefficient| beyond this on the linear-predictor scale suggests separation
SEPARATION_GUARD = 30.0


# --------------------------------------------------------------------------- #
# Containers
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Regressor matrix with named columns.

    Parameters
    ----------
    values : (n, p) array
    column_names : sequence of str
        Unique term identifiers, one per column.
    intercept_included : bool
        Whether one of the columns is a constant intercept.
    """

    values: np.ndarray
    column_names: tuple[str, ...]
    intercept_included: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ValidationError("design values must be a 2-D array")
        names = tuple(str(c) for c in self.column_names)
        n, p = values.shape
        if len(names) != p:
            raise ValidationError(f"{len(names)} column names for {p} columns")
        if len(set(names)) != p:
            dupes = sorted({c for c in names if names.count(c) > 1})
            raise ValidationError(f"duplicate column names: {dupes}")
        if n < p:
            raise ValidationError(f"design has {n} rows but {p} columns")
        if not np.all(np.isfinite(values)):
            raise ValidationError("design contains non-finite values")
        zero = [c for c, col in zip(names, values.T) if not np.any(col)]
        if zero:
            raise ValidationError(f"all-zero design columns: {zero}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_names", names)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.column_names.index(name)]

    @classmethod
    def from_columns(cls, columns: Mapping[str, np.ndarray], intercept: bool = True,
                     intercept_name: str = "(Intercept)") -> "DesignMatrix":
        cols = {k: np.asarray(v, dtype=float) for k, v in columns.items()}
        n = len(next(iter(cols.values()))) if cols else 0
        names, arrays = [], []
        if intercept:
            names.append(intercept_name)
            arrays.append(np.ones(n))
        for k, v in cols.items():
            names.append(k)
            arrays.append(v)
        return cls(np.column_stack(arrays), tuple(names), intercept)

    def hstack(self, other: "DesignMatrix") -> "DesignMatrix":
        return DesignMatrix(np.hstack([self.values, other.values]),
                            self.column_names + other.column_names,
                            self.intercept_included or other.intercept_included)


@dataclass(frozen=True, eq=False)
class ModelFit:
    """Result of a linear or logistic fit."""

    coefficients: np.ndarray
    covariance: np.ndarray
    column_names: tuple[str, ...]
    covariance_kind: str
    n_obs: int
    residual_variance: float | None = None
    converged: bool = True
    n_iterations: int = 0
    log_likelihood: float | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        p = len(self.coefficients)
        if self.covariance.shape != (p, p) or len(self.column_names) != p:
            raise ValidationError("coefficient, covariance and name dimensions disagree")

    def index(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise KeyError(f"no term named {name!r}; terms are {list(self.column_names)}") from None

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.index(name)])

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def sub_covariance(self, names: Sequence[str]) -> np.ndarray:
        idx = [self.index(n) for n in names]
        return self.covariance[np.ix_(idx, idx)]

    def contrast(self, weights: Mapping[str, float]) -> tuple[float, float]:
        """Point estimate and delta-method standard error of ``sum_k w_k b_k``."""
        c = np.zeros(len(self.coefficients))
        for name, w in weights.items():
            c[self.index(name)] += w
        return float(c @ self.coefficients), float(np.sqrt(max(c @ self.covariance @ c, 0.0)))


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Natural cubic spline basis with fixed knots (no intercept column).

    The basis spans cubic splines that are linear beyond the boundary knots.
    ``degrees_of_freedom`` equals the number of interior knots plus one.
    """

    interior_knots: np.ndarray
    boundary_knots: tuple[float, float]
    degrees_of_freedom: int = field(init=False)

    def __post_init__(self):
        inner = np.asarray(self.interior_knots, dtype=float)
        lo, hi = (float(b) for b in self.boundary_knots)
        allk = np.concatenate([[lo], inner, [hi]])
        if not np.all(np.diff(allk) > 0):
            raise DegenerateInputError(
                f"spline knots must be strictly increasing, got {allk.tolist()}")
        inner.setflags(write=False)
        object.__setattr__(self, "interior_knots", inner)
        object.__setattr__(self, "boundary_knots", (lo, hi))
        object.__setattr__(self, "degrees_of_freedom", len(inner) + 1)
        object.__setattr__(self, "_projection", self._constraint_projection())

    def _bspline(self) -> BSpline:
        lo, hi = self.boundary_knots
        t = np.concatenate([[lo] * 4, self.interior_knots, [hi] * 4])
        nb = len(t) - 4
        return BSpline(t, np.eye(nb), 3, extrapolate=True)

    def _constraint_projection(self) -> np.ndarray:
        # Drop the first B-spline (absorbed by the model intercept), then
        # project onto the null space of the second derivative at both ends.
        second = self._bspline().derivative(2)(np.array(self.boundary_knots))[:, 1:]
        q, _ = np.linalg.qr(second.T, mode="complete")
        return q[:, 2:]

    def evaluate(self, x, deriv: int = 0) -> np.ndarray:
        """Basis values (or derivatives up to order 2) at ``x``; shape (n, df)."""
        x = np.asarray(x, dtype=float).ravel()
        lo, hi = self.boundary_knots
        spl = self._bspline()
        proj = self._projection
        out = np.empty((len(x), self.degrees_of_freedom))
        inside = (x >= lo) & (x <= hi)
        if deriv == 0:
            out[inside] = spl(x[inside])[:, 1:] @ proj
        else:
            out[inside] = spl.derivative(deriv)(x[inside])[:, 1:] @ proj
        for edge, mask in ((lo, x < lo), (hi, x > hi)):
            if not mask.any():
                continue
            slope = spl.derivative(1)(np.array([edge]))[:, 1:] @ proj
            if deriv == 0:
                value = spl(np.array([edge]))[:, 1:] @ proj
                out[mask] = value + (x[mask] - edge)[:, None] * slope
            elif deriv == 1:
                out[mask] = slope
            else:
                out[mask] = 0.0
        return out

    def design(self, x, prefix: str = "ns") -> DesignMatrix:
        names = tuple(f"{prefix}[{k}]" for k in range(1, self.degrees_of_freedom + 1))
        return DesignMatrix(self.evaluate(x), names, intercept_included=False)


# --------------------------------------------------------------------------- #
# Least squares
# --------------------------------------------------------------------------- #


def _pivoted_qr(a: np.ndarray, names: Sequence[str]):
    q, r, piv = linalg.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag[0] * max(a.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    if rank < a.shape[1]:
        dropped = [names[j] for j in piv[rank:]]
        raise SingularDesignError(
            f"design is rank deficient (rank {rank} < {a.shape[1]}); "
            f"collinear columns: {dropped}", collinear=dropped)
    return q, r, piv


def _unpivot_inverse(r: np.ndarray, piv: np.ndarray) -> np.ndarray:
    """(A'A)^{-1} in original column order from the pivoted R factor."""
    rinv = linalg.solve_triangular(r, np.eye(r.shape[0]))
    inv_piv = rinv @ rinv.T
    out = np.empty_like(inv_piv)
    out[np.ix_(piv, piv)] = inv_piv
    return out


def _check_weights(weights, n: int) -> np.ndarray:
    if weights is None:
        return np.ones(n)
    w = np.asarray(weights, dtype=float).ravel()
    if w.shape != (n,):
        raise ValidationError(f"weights have length {w.size}, expected {n}")
    if not np.all(np.isfinite(w)):
        raise ValidationError("weights must be finite")
    neg = np.flatnonzero(w < 0)
    if neg.size:
        raise ValidationError(f"negative weights at rows {neg[:10].tolist()}")
    return w


def fit_wls(design: DesignMatrix, response, weights=None,
            covariance_kind: str = MODEL_BASED) -> ModelFit:
    """Weighted least squares.

    Minimises ``sum_i w_i (y_i - x_i b)^2`` over the rows with positive
    weight. The model-based covariance is ``s^2 (X'WX)^{-1}`` with
    ``s^2 = sum w e^2 / (n - p)``; the sandwich covariance is HC1,
    ``n/(n-p) (X'WX)^{-1} X'W diag(e^2) WX (X'WX)^{-1}``. Here ``n`` counts
    rows with positive weight.
    """
    if covariance_kind not in COVARIANCE_KINDS:
        raise ValidationError(f"covariance_kind must be one of {COVARIANCE_KINDS}")
    X = design.values
    y = np.asarray(response, dtype=float).ravel()
    n_all, p = X.shape
    if y.shape != (n_all,):
        raise ValidationError(f"response has length {y.size}, expected {n_all}")
    if not np.all(np.isfinite(y)):
        raise ValidationError("response contains non-finite values")
    w = _check_weights(weights, n_all)
    keep = w > 0
    n = int(keep.sum())
    if n < p:
        raise SingularDesignError(f"only {n} rows with positive weight for {p} coefficients")
    Xk, yk, wk = X[keep], y[keep], w[keep]
    sw = np.sqrt(wk)
    q, r, piv = _pivoted_qr(Xk * sw[:, None], design.column_names)
    beta = np.empty(p)
    beta[piv] = linalg.solve_triangular(r, q.T @ (yk * sw))
    resid = yk - Xk @ beta
    bread = _unpivot_inverse(r, piv)
    dof = n - p
    sigma2 = float(np.sum(wk * resid**2) / dof) if dof > 0 else float("nan")
    if covariance_kind == MODEL_BASED:
        cov = sigma2 * bread
    else:
        scores = Xk * (wk * resid)[:, None]
        cov = bread @ (scores.T @ scores) @ bread
        cov *= n / dof if dof > 0 else np.nan
    cov = 0.5 * (cov + cov.T)
    return ModelFit(beta, cov, design.column_names, covariance_kind, n,
                    residual_variance=sigma2)


def fit_ols(design: DesignMatrix, response, covariance_kind: str = MODEL_BASED) -> ModelFit:
    return fit_wls(design, response, None, covariance_kind)


def influence_rows(design: DesignMatrix, response, coefficients, weights=None) -> np.ndarray:
    """Per-row influence of a WLS fit: ``(X'WX)^{-1} x_i w_i e_i`` as an (n, p) array.

    ``influence_rows(...).T @ influence_rows(...)`` is the HC0 sandwich.
    Stacking influence rows of several fits on the same units gives their
    joint covariance.
    """
    X = design.values
    y = np.asarray(response, dtype=float)
    w = _check_weights(weights, X.shape[0])
    resid = y - X @ np.asarray(coefficients)
    sw = np.sqrt(w)
    _, r, piv = _pivoted_qr(X[w > 0] * sw[w > 0, None], design.column_names)
    bread = _unpivot_inverse(r, piv)
    return (X * (w * resid)[:, None]) @ bread


# --------------------------------------------------------------------------- #
# Logistic regression
# --------------------------------------------------------------------------- #


def _binomial_loglik(eta: np.ndarray, y: np.ndarray) -> float:
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _intercept_name(design: DesignMatrix) -> str:
    for name, col in zip(design.column_names, design.values.T):
        if np.all(col == 1.0):
            return name
    raise ValidationError("intercept_included is set but no constant column exists")


def _newton_step(X, wt, resid, score) -> np.ndarray:
    info = (X * wt[:, None]).T @ X
    try:
        factor = linalg.cho_factor(info, check_finite=False)
        step = linalg.cho_solve(factor, score, check_finite=False)
        if np.all(np.isfinite(step)):
            return step
    except linalg.LinAlgError:
        pass
    sw = np.sqrt(np.maximum(wt, 1e-300))
    step, *_ = linalg.lstsq(X * sw[:, None], resid / sw, lapack_driver="gelsy")
    return step


def fit_logistic(design: DesignMatrix, response, tolerance: float = 1e-8,
                 max_iterations: int = 50) -> ModelFit:
    """Binomial-logit maximum likelihood by IRLS with step halving.

    ``converged`` is true when the largest absolute score component drops
    below ``tolerance``. The covariance is the inverse observed information
    at the final iterate. Non-convergence and separation are reported on the
    returned fit (and as warnings) rather than raised.
    """
    X = design.values
    y = np.asarray(response, dtype=float).ravel()
    n, p = X.shape
    if y.shape != (n,):
        raise ValidationError(f"response has length {y.size}, expected {n}")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("logistic response must be coded 0/1")
    if y.min() == y.max():
        raise ValidationError("logistic response has only one class")
    _pivoted_qr(X, design.column_names)

    beta = np.zeros(p)
    if design.intercept_included:
        ybar = y.mean()
        beta[design.column_names.index(_intercept_name(design))] = np.log(ybar / (1 - ybar))
    eta = X @ beta
    ll = _binomial_loglik(eta, y)
    converged = False
    steps = 0
    while True:
        mu = special.expit(eta)
        score = X.T @ (y - mu)
        if np.max(np.abs(score)) < tolerance:
            converged = True
            break
        if steps >= max_iterations:
            break
        delta = _newton_step(X, mu * (1.0 - mu), y - mu, score)
        step = 1.0
        for _ in range(40):
            cand = beta + step * delta
            eta_c = X @ cand
            ll_c = _binomial_loglik(eta_c, y)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            step *= 0.5
        beta, eta, ll = cand, eta_c, ll_c
        steps += 1

    mu = special.expit(eta)
    wt = mu * (1.0 - mu)
    info = (X * wt[:, None]).T @ X
    notes = []
    try:
        cov = linalg.inv(info)
    except linalg.LinAlgError:
        cov = linalg.pinv(info)
        notes.append("observed information is singular; covariance uses a pseudo-inverse")
    cov = 0.5 * (cov + cov.T)
    if not converged:
        msg = f"IRLS did not converge in {max_iterations} iterations (max |score| {np.max(np.abs(X.T @ (y - mu))):.3g})"
        notes.append(msg)
        warnings.warn(msg, ConvergenceWarning, stacklevel=2)
    big = [c for c, b in zip(design.column_names, beta) if abs(b) > SEPARATION_GUARD]
    if big:
        msg = f"possible quasi-complete separation: |coefficient| > {SEPARATION_GUARD:g} for {big}"
        notes.append(msg)
        warnings.warn(msg, SeparationWarning, stacklevel=2)
    return ModelFit(beta, cov, design.column_names, MODEL_BASED, n,
                    converged=converged, n_iterations=steps, log_likelihood=ll,
                    warnings=tuple(notes))


def logistic_score(design: DesignMatrix, response, coefficients) -> np.ndarray:
    X = design.values
    return X.T @ (np.asarray(response, float) - special.expit(X @ np.asarray(coefficients)))


def logistic_loglik(design: DesignMatrix, response, coefficients) -> float:
    return _binomial_loglik(design.values @ np.asarray(coefficients), np.asarray(response, float))


# --------------------------------------------------------------------------- #
# Splines
# --------------------------------------------------------------------------- #


def spline_knots(x, n_knots: int) -> SplineBasis:
    """Knots at equally spaced interior quantiles of ``x``; boundaries at min/max."""
    x = np.asarray(x, dtype=float).ravel()
    if n_knots < 1:
        raise ValidationError("n_knots must be at least 1")
    if not np.all(np.isfinite(x)):
        raise ValidationError("spline input contains non-finite values")
    distinct = np.unique(x).size
    if distinct < n_knots + 2:
        raise DegenerateInputError(
            f"natural spline with {n_knots} knots needs at least {n_knots + 2} "
            f"distinct values, got {distinct}")
    probs = np.arange(1, n_knots + 1) / (n_knots + 1)
    return SplineBasis(np.quantile(x, probs), (float(x.min()), float(x.max())))


def natural_spline_basis(x, n_knots: int, prefix: str = "ns") -> DesignMatrix:
    """Natural cubic spline design (``n_knots + 1`` columns, no intercept)."""
    return spline_knots(x, n_knots).design(x, prefix=prefix)


# --------------------------------------------------------------------------- #
# Sampling and normal theory
# --------------------------------------------------------------------------- #


def mvn_sample(mean, correlation: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` rows from a bivariate normal with unit variances."""
    if not -1.0 < correlation < 1.0:
        raise ValidationError(f"correlation must lie in (-1, 1), got {correlation}")
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (2,):
        raise ValidationError("mean must be a 2-vector")
    chol = np.linalg.cholesky(np.array([[1.0, correlation], [correlation, 1.0]]))
    return mean + rng.standard_normal((n, 2)) @ chol.T


@functools.lru_cache(maxsize=64)
def normal_quantile(ci_level: float) -> float:
    if not 0.0 < ci_level < 1.0:
        raise ValidationError(f"ci_level must lie in (0, 1), got {ci_level}")
    return float(stats.norm.ppf(0.5 + ci_level / 2.0))


def normal_ci(point: float, std_error: float, ci_level: float = 0.95) -> tuple[float, float]:
    half = normal_quantile(ci_level) * std_error
    return point - half, point + half
