"""
SATE and TATE estimation when every moderator is observed in both samples.

Two routes to the target-population effect are provided: plugging target
moderator means into an outcome model with treatment interactions, and
reweighting the RCT by the estimated odds of target-sample membership.
Balance and overlap diagnostics accompany the weights.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import RoleMap, StackedDataset, sample_means, weighted_mean
from .errors import (
    DegenerateWeightsError,
    EstimationError,
    PositivityError,
    PositivityWarning,
    ValidationError,
)
from .numerics import (
    MODEL_BASED,
    SANDWICH,
    DesignMatrix,
    ModelFit,
    fit_logistic,
    fit_wls,
    normal_ci,
    normal_quantile,
    spline_knots,
)

DEFAULT_CI_LEVEL = 0.95
SPLINE_KNOTS = 9
OVERLAP_TRIM = 0.05
NEAR_VIOLATION = 1e-6


@dataclass(frozen=True)
class EffectEstimate:
    estimand: str
    point: float
    std_error: float
    method: str
    ci_level: float = DEFAULT_CI_LEVEL
    ci: tuple[float, float] | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if self.ci is None:
            object.__setattr__(self, "ci", normal_ci(self.point, self.std_error, self.ci_level))

    def to_dict(self) -> dict:
        return {"estimand": self.estimand, "method": self.method, "point": self.point,
                "std_error": self.std_error, "ci_level": self.ci_level,
                "ci": list(self.ci), "warnings": list(self.warnings)}


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Non-negative weights for the RCT rows, in RCT row order."""

    weights: np.ndarray
    balanced_columns: tuple[str, ...]
    formula: str
    warnings: tuple[str, ...] = ()
    fit: ModelFit | None = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValidationError("weights must be finite and non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "balanced_columns", tuple(self.balanced_columns))

    def scaled(self, factor: float) -> "WeightVector":
        return WeightVector(self.weights * factor, self.balanced_columns, self.formula,
                            self.warnings, self.fit)


@dataclass(frozen=True)
class BalanceRow:
    column: str
    target_mean: float
    rct_mean: float
    rct_weighted_mean: float
    rct_sd: float
    smd_before: float | None
    smd_after: float | None
    overlap_flag: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class BalanceReport:
    rows: tuple[BalanceRow, ...]

    def __getitem__(self, column: str) -> BalanceRow:
        for row in self.rows:
            if row.column == column:
                return row
        raise KeyError(column)

    @property
    def columns(self) -> list[str]:
        return [r.column for r in self.rows]

    def max_abs_smd_after(self) -> float:
        vals = [abs(r.smd_after) for r in self.rows if r.smd_after is not None]
        return max(vals) if vals else 0.0

    def to_dict(self) -> dict:
        return {"columns": [r.to_dict() for r in self.rows]}


# --------------------------------------------------------------------------- #
# Shared helpers
# --------------------------------------------------------------------------- #


def interaction_term(column: str, data: StackedDataset) -> str:
    return f"{column}:{data.t_column}"


def interaction_design(data: StackedDataset, main_effects: Sequence[str],
                       moderators: Sequence[str]) -> DesignMatrix:
    """RCT-row design: intercept, T, main effects, and moderator-by-T terms."""
    t = data.rct_t
    cols = {data.t_column: t}
    for name in main_effects:
        cols[name] = data.rct_column(name)
    for name in moderators:
        cols[interaction_term(name, data)] = data.rct_column(name) * t
    return DesignMatrix.from_columns(cols, intercept=True)


def _require_arms(data: StackedDataset, weights=None) -> None:
    t = data.rct_t
    w = np.ones(t.size) if weights is None else weights
    for arm in (0, 1):
        if not np.any((t == arm) & (w > 0)):
            label = "treated" if arm else "control"
            raise EstimationError(f"no {label} RCT rows" + (" with positive weight" if weights is not None else ""))


def _check_observed_both(data: StackedDataset, columns: Iterable[str],
                         roles: RoleMap | None) -> None:
    for name in columns:
        if roles is not None and name in roles and roles.role(name) == "V":
            raise ValidationError(
                f"column {name!r} has role V (not observed in the target sample) "
                f"and cannot be balanced by weighting")
        if np.any(np.isnan(data.column(name))):
            raise ValidationError(f"column {name!r} is not observed on every row of both samples")


def overlap_problems(data: StackedDataset, columns: Iterable[str],
                     trim: float = OVERLAP_TRIM) -> list[str]:
    """Describe moderators whose target support is not covered by the RCT.

    Continuous columns: the central ``1 - trim`` range of the target values must
    lie inside the RCT range. Binary columns: every level seen in the target
    must occur in both RCT arms.
    """
    problems = []
    t = data.rct_t
    for name in columns:
        r, g = data.rct_column(name), data.target_column(name)
        if data.is_binary(name):
            for level in np.unique(g):
                for arm in (0, 1):
                    if not np.any((r == level) & (t == arm)):
                        problems.append(f"{name}={level:g} has no RCT rows with T={arm}")
        else:
            lo, hi = np.quantile(g, [trim / 2, 1 - trim / 2])
            if lo < r.min() or hi > r.max():
                problems.append(f"{name}: target range [{lo:.4g}, {hi:.4g}] "
                                f"(central {1 - trim:.0%}) exceeds RCT range "
                                f"[{r.min():.4g}, {r.max():.4g}]")
    return problems


def contrast_interval(coefficients, covariance, contrasts, ci_level: float) -> tuple[float, float]:
    """Normal-theory interval covering every contrast vector in ``contrasts``.

    With a single contrast this is the delta-method CI; with several (e.g.
    evaluated at the corners of a confidence box for plug-in means) it is
    their union.
    """
    z = normal_quantile(ci_level)
    contrasts = np.atleast_2d(contrasts)
    est = contrasts @ coefficients
    se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", contrasts, covariance, contrasts), 0, None))
    return float(np.min(est - z * se)), float(np.max(est + z * se))


def target_mean_limits(data: StackedDataset, columns: Sequence[str],
                       ci_level: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Target-sample means with componentwise normal confidence limits."""
    z = normal_quantile(ci_level)
    means, lower, upper = [], [], []
    for name in columns:
        g = data.target_column(name)
        m = g.mean()
        se = g.std(ddof=1) / np.sqrt(g.size) if g.size > 1 else 0.0
        means.append(m)
        lower.append(m - z * se)
        upper.append(m + z * se)
    return np.array(means), np.array(lower), np.array(upper)


def mean_corners(means: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    if means.size == 0:
        return means[None, :]
    return np.array(list(itertools.product(*zip(lower, upper))))


# --------------------------------------------------------------------------- #
# Estimators
# --------------------------------------------------------------------------- #


def estimate_sate(data: StackedDataset, roles: RoleMap | None = None, adjust: bool = False,
                  ci_level: float = DEFAULT_CI_LEVEL) -> EffectEstimate:
    """RCT difference in mean outcomes with a Welch standard error.

    With ``adjust=True`` the estimate is the T coefficient of an OLS fit on T
    plus the X and Z (and V) main effects.
    """
    _require_arms(data)
    t, y = data.rct_t, data.rct_y
    if adjust:
        mains = list(roles.roles) if roles is not None else data.columns
        fit = fit_wls(interaction_design(data, mains, []), y)
        point, se = fit.contrast({data.t_column: 1.0})
        return EffectEstimate("SATE", point, se, "outcome-model", ci_level)
    y1, y0 = y[t == 1], y[t == 0]
    if y1.size < 2 or y0.size < 2:
        raise EstimationError("each arm needs at least two RCT rows for a standard error")
    point = float(y1.mean() - y0.mean())
    se = float(np.sqrt(y1.var(ddof=1) / y1.size + y0.var(ddof=1) / y0.size))
    return EffectEstimate("SATE", point, se, "difference-in-means", ci_level)


def estimate_tate_outcome_model(data: StackedDataset, roles: RoleMap,
                                ci_level: float = DEFAULT_CI_LEVEL,
                                check_overlap: bool = True,
                                z_uncertainty: bool = False) -> tuple[EffectEstimate, ModelFit]:
    """TATE from an interaction outcome model fit to the RCT.

    The model has main effects for every X and Z column and a Z-by-T term per
    Z column. The estimate is ``b_t + b_zt . mean_target(Z)`` with a
    delta-method standard error. ``z_uncertainty`` widens the interval to
    cover the contrast at every corner of the target means' confidence box.
    V-role columns are left out (they cannot be plugged in) with a warning.
    """
    notes = []
    if roles.v:
        notes.append(f"V-role columns {roles.v} ignored; use a V sensitivity analysis")
    if check_overlap:
        problems = overlap_problems(data, roles.z)
        if problems:
            raise PositivityError("moderator overlap check failed: " + "; ".join(problems))
    _require_arms(data)
    fit = fit_wls(interaction_design(data, roles.x + roles.z, roles.z), data.rct_y)
    terms = [data.t_column] + [interaction_term(z, data) for z in roles.z]
    coef = fit.coefficients[[fit.index(n) for n in terms]]
    cov = fit.sub_covariance(terms)
    means, lower, upper = target_mean_limits(data, roles.z, ci_level)
    c = np.concatenate([[1.0], means])
    point = float(c @ coef)
    se = float(np.sqrt(max(c @ cov @ c, 0.0)))
    ci = None
    if z_uncertainty:
        corners = mean_corners(means, lower, upper)
        contrasts = np.column_stack([np.ones(len(corners)), corners])
        ci = contrast_interval(coef, cov, contrasts, ci_level)
    est = EffectEstimate("TATE", point, se, "outcome-model", ci_level, ci, tuple(notes))
    return est, fit


def membership_design(data: StackedDataset, columns: Sequence[str],
                      spline_for_continuous: bool = True,
                      n_knots: int = SPLINE_KNOTS) -> DesignMatrix:
    """Stacked-sample design for the membership model (intercept first)."""
    parts = {"(Intercept)": np.ones(data.n)}
    for name in columns:
        col = data.column(name)
        if spline_for_continuous and not data.is_binary(name):
            basis = spline_knots(col, n_knots).evaluate(col)
            for k in range(basis.shape[1]):
                parts[f"ns({name})[{k + 1}]"] = basis[:, k]
        else:
            parts[name] = col
    return DesignMatrix(np.column_stack(list(parts.values())), tuple(parts), True)


def membership_weights(data: StackedDataset, columns: Sequence[str],
                       spline_for_continuous: bool = True, roles: RoleMap | None = None,
                       n_knots: int = SPLINE_KNOTS, tolerance: float = 1e-8,
                       max_iterations: int = 50) -> WeightVector:
    """Odds of target membership, P(S=0|cols) / P(S=1|cols), for each RCT row.

    A logistic model for S=0 is fit to the stacked samples; continuous columns
    are expanded in a natural spline basis when ``spline_for_continuous``.
    """
    columns = list(columns)
    _check_observed_both(data, columns, roles)
    design = membership_design(data, columns, spline_for_continuous, n_knots)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_logistic(design, data.target.astype(float), tolerance, max_iterations)
    notes = list(fit.warnings)
    eta = design.values[data.rct] @ fit.coefficients
    p_rct = 1.0 / (1.0 + np.exp(eta))
    near = np.flatnonzero(p_rct < NEAR_VIOLATION)
    if near.size:
        msg = (f"estimated P(S=1|x) below {NEAR_VIOLATION:g} for RCT rows "
               f"{(near[:10] + 1).tolist()}; positivity is nearly violated")
        notes.append(msg)
        warnings.warn(msg, PositivityWarning, stacklevel=2)
    for w in caught:
        if str(w.message) not in notes:
            notes.append(str(w.message))
    if roles is not None and any(roles.role(c) == "X" for c in columns if c in roles):
        formula = "odds-given-XZ"
    else:
        formula = "odds-given-Z"
    return WeightVector(np.exp(eta), columns, formula, tuple(notes), fit)


def _as_weights(data: StackedDataset, weights) -> np.ndarray:
    w = np.asarray(getattr(weights, "weights", weights), dtype=float)
    if w.shape != (data.n_rct,):
        raise ValidationError(f"weights must have one entry per RCT row ({data.n_rct}), got {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValidationError("weights must be finite and non-negative")
    return w


def estimate_tate_weighted(data: StackedDataset, weights, ci_level: float = DEFAULT_CI_LEVEL,
                           adjust_columns: Sequence[str] | None = None,
                           estimand: str = "TATE") -> EffectEstimate:
    """Hájek weighted difference in RCT arm means.

    The standard error is the HC1 sandwich of a weighted regression of Y on T
    (whose T coefficient equals the weighted mean difference). Passing
    ``adjust_columns`` adds those columns as main effects to the weighted
    regression and reports its T coefficient instead.
    """
    w = _as_weights(data, weights)
    t = data.rct_t
    for arm in (0, 1):
        if not w[t == arm].sum() > 0:
            raise DegenerateWeightsError(
                f"{'treated' if arm else 'control'} arm has zero total weight")
    design = interaction_design(data, list(adjust_columns or []), [])
    fit = fit_wls(design, data.rct_y, w, SANDWICH)
    point, se = fit.contrast({data.t_column: 1.0})
    notes = tuple(getattr(weights, "warnings", ()))
    return EffectEstimate(estimand, point, se, "weighting", ci_level, warnings=notes)


def balance_report(data: StackedDataset, columns: Sequence[str], weights=None,
                   roles: RoleMap | None = None) -> BalanceReport:
    """Standardised mean differences before and after weighting.

    SMD = (target mean - RCT mean) / unweighted RCT SD. The overlap flag is
    raised when the target range of a column extends beyond its RCT range.
    """
    _check_observed_both(data, columns, roles)
    w = np.ones(data.n_rct) if weights is None else _as_weights(data, weights)
    rows = []
    for name in columns:
        r, g = data.rct_column(name), data.target_column(name)
        sd = float(np.std(r, ddof=1)) if r.size > 1 else 0.0
        tm, rm, wm = float(g.mean()), float(r.mean()), weighted_mean(r, w)
        ok = sd > 0
        rows.append(BalanceRow(
            name, tm, rm, wm, sd,
            (tm - rm) / sd if ok else None,
            (tm - wm) / sd if ok else None,
            bool(g.min() < r.min() or g.max() > r.max())))
    return BalanceReport(tuple(rows))


def z_means(data: StackedDataset, columns: Sequence[str], sample: str = "target",
            weights=None) -> np.ndarray:
    """Convenience accessor for sample (or weighted RCT) means of columns."""
    table = sample_means(data, columns=columns, weights=weights)
    return table.means(columns, sample)
