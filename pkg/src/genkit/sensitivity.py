"""
Sensitivity analyses for moderators that cannot be adjusted for directly.

V case: a moderator measured in the RCT but not in the target sample. Its
target mean (or, for binary Z and V, its target prevalence within Z strata)
is swept over a user-supplied grid.

U case: a composite moderator measured nowhere, standardised and defined as
the moderation left over after accounting for Z (or for X and Z). The
product of its moderation effect and its between-sample mean gap is swept.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import RoleMap, StackedDataset, validate_roles, weighted_mean
from .errors import (
    DegenerateWeightsError,
    EstimationError,
    OverlapError,
    ValidationError,
)
from .estimators import (
    DEFAULT_CI_LEVEL,
    WeightVector,
    balance_report,
    contrast_interval,
    estimate_tate_weighted,
    interaction_design,
    interaction_term,
    mean_corners,
    membership_weights,
    target_mean_limits,
)
from .numerics import MODEL_BASED, SANDWICH, ModelFit, fit_wls, influence_rows, normal_quantile

V_METHODS = ("outcome-model", "full-weighting", "weighted-outcome-model")
U_METHODS = ("bias-formula", "weighting-plus-bias-formula")
DEFAULT_GRID_POINTS = 101
BALANCE_THRESHOLD = 0.1


def parse_grid(text: str) -> np.ndarray:
    """``"lo:hi:n"`` -> ``n`` equally spaced values from lo to hi inclusive."""
    parts = str(text).split(":")
    if len(parts) != 3:
        raise ValidationError(f"grid must look like lo:hi:n, got {text!r}")
    try:
        lo, hi, n = float(parts[0]), float(parts[1]), int(parts[2])
    except ValueError:
        raise ValidationError(f"grid must look like lo:hi:n, got {text!r}") from None
    if n < 1 or (n == 1 and lo != hi) or hi < lo:
        raise ValidationError(f"invalid grid {text!r}")
    return np.linspace(lo, hi, n)


# --------------------------------------------------------------------------- #
# Specs and results
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class VSensitivitySpec:
    """Settings for a V-case analysis.

    ``grid`` holds candidate target means of the V columns: shape ``(k,)`` for
    one V column or ``(k, n_v)`` for several. For ``full-weighting``, ``grid``
    holds P(V=1|S=0,Z=1) and ``grid2`` holds P(V=1|S=0,Z=0); their cross
    product is evaluated.
    """

    method: str = "outcome-model"
    grid: Sequence | None = None
    grid2: Sequence | None = None
    v_columns: Sequence[str] | None = None
    weighting_columns: Sequence[str] | None = None
    allow_extrapolation: bool = False
    z_uncertainty: bool = False
    spline_for_continuous: bool = True
    ci_level: float = DEFAULT_CI_LEVEL
    balance_threshold: float = BALANCE_THRESHOLD
    allow_three_way: bool = False

    def __post_init__(self):
        if self.method not in V_METHODS:
            raise ValidationError(f"V-case method must be one of {V_METHODS}, got {self.method!r}")


@dataclass(frozen=True)
class USensitivitySpec:
    """Settings for a U-case analysis.

    ``beta_ut`` is the change in treatment effect per SD of U (outcome units);
    ``delta_u`` is the target-minus-RCT mean of U in SD units. The grid is
    their cross product, ``beta_ut`` varying slowest.
    """

    beta_ut: Sequence[float]
    delta_u: Sequence[float]
    adjustment: str = "bias-formula"
    residual_z_gap_correction: bool = False
    weighting_columns: Sequence[str] | None = None
    spline_for_continuous: bool = True
    ci_level: float = DEFAULT_CI_LEVEL

    def __post_init__(self):
        if self.adjustment not in U_METHODS:
            raise ValidationError(f"U-case adjustment must be one of {U_METHODS}, got {self.adjustment!r}")


@dataclass(frozen=True, eq=False)
class SensitivityResult:
    """TATE point estimate and CI at each grid point (long format)."""

    method: str
    parameter_names: tuple[str, ...]
    grid: np.ndarray
    tate: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    warnings: tuple[str, ...] = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim == 1:
            grid = grid[:, None]
        object.__setattr__(self, "grid", grid)
        for name in ("tate", "ci_lower", "ci_upper"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "parameter_names", tuple(self.parameter_names))
        object.__setattr__(self, "warnings", tuple(self.warnings))

    def __len__(self) -> int:
        return self.tate.size

    @property
    def header(self) -> list[str]:
        return [*self.parameter_names, "tate", "ci_lower", "ci_upper"]

    def rows(self) -> list[list[float]]:
        return [[*g, t, lo, hi] for g, t, lo, hi in
                zip(self.grid.tolist(), self.tate.tolist(),
                    self.ci_lower.tolist(), self.ci_upper.tolist())]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        for row in self.rows():
            writer.writerow(["NA" if np.isnan(v) else repr(float(v)) for v in row])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def to_dict(self) -> dict:
        return {"method": self.method, "parameters": list(self.parameter_names),
                "n_grid": len(self), "tate_range": [float(np.min(self.tate)), float(np.max(self.tate))],
                "warnings": list(self.warnings), "metadata": self.metadata}


# --------------------------------------------------------------------------- #
# V case
# --------------------------------------------------------------------------- #


def v_outcome_formula(coefficients, covariance, z_target_means, v_grid,
                      ci_level: float = DEFAULT_CI_LEVEL, z_limits=None,
                      parameter_names: Sequence[str] | None = None,
                      method: str = "outcome-model") -> SensitivityResult:
    """Evaluate ``b_t + b_zt . zbar0 + b_vt . vbar0`` across a grid of ``vbar0``.

    ``coefficients`` are ordered (b_t, b_zt..., b_vt...) and ``covariance`` is
    their joint covariance (``None`` gives NaN intervals). ``z_limits`` is an
    optional (lower, upper) pair for the target Z means; the interval then
    covers the contrast at every corner of that box.
    """
    coef = np.asarray(coefficients, dtype=float)
    zbar = np.atleast_1d(np.asarray(z_target_means, dtype=float))
    grid = np.asarray(v_grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    n_z, n_v = zbar.size, grid.shape[1]
    if coef.size != 1 + n_z + n_v:
        raise ValidationError(f"expected {1 + n_z + n_v} coefficients, got {coef.size}")
    base = coef[0] + coef[1:1 + n_z] @ zbar
    tate = base + grid @ coef[1 + n_z:]
    lower = np.full(tate.shape, np.nan)
    upper = np.full(tate.shape, np.nan)
    if covariance is not None:
        cov = np.asarray(covariance, dtype=float)
        z = normal_quantile(ci_level)
        if z_limits is None:
            contrasts = np.column_stack([np.ones(len(grid)), np.tile(zbar, (len(grid), 1)), grid])
            se = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", contrasts, cov, contrasts), 0, None))
            lower, upper = tate - z * se, tate + z * se
        else:
            corners = mean_corners(zbar, np.asarray(z_limits[0]), np.asarray(z_limits[1]))
            for i, g in enumerate(grid):
                cs = np.column_stack([np.ones(len(corners)), corners, np.tile(g, (len(corners), 1))])
                lower[i], upper[i] = contrast_interval(coef, cov, cs, ci_level)
    names = parameter_names or [f"mean_v{k + 1}_target" for k in range(n_v)]
    return SensitivityResult(method, tuple(names), grid, tate, lower, upper)


def _v_columns(roles: RoleMap, spec: VSensitivitySpec) -> list[str]:
    cols = list(spec.v_columns) if spec.v_columns else roles.v
    if not cols:
        raise ValidationError("V-case analysis needs at least one V-role column")
    for c in cols:
        if roles.role(c) != "V":
            raise ValidationError(f"column {c!r} has role {roles.role(c)}, not V")
    return cols


def _v_grid(data: StackedDataset, v_cols: list[str], spec: VSensitivitySpec):
    if spec.grid is None:
        if len(v_cols) != 1:
            raise ValidationError("an explicit grid is required with several V columns")
        r = data.rct_column(v_cols[0])
        grid = np.linspace(r.min(), r.max(), DEFAULT_GRID_POINTS)[:, None]
    else:
        grid = np.asarray(spec.grid, dtype=float)
        if grid.ndim == 1:
            grid = grid[:, None]
    if grid.shape[1] != len(v_cols):
        raise ValidationError(f"grid has {grid.shape[1]} columns for {len(v_cols)} V columns")
    notes = []
    for k, name in enumerate(v_cols):
        r = data.rct_column(name)
        lo, hi = float(r.min()), float(r.max())
        outside = (grid[:, k] < lo) | (grid[:, k] > hi)
        if outside.any():
            msg = (f"grid for {name!r} spans [{grid[:, k].min():.4g}, {grid[:, k].max():.4g}] "
                   f"but the RCT range is [{lo:.4g}, {hi:.4g}]")
            if not spec.allow_extrapolation:
                raise OverlapError(msg + "; pass allow_extrapolation to override")
            notes.append("extrapolation override: " + msg)
    return grid, notes


def _v_model_result(data, roles, spec, fit: ModelFit, v_cols, method) -> SensitivityResult:
    grid, notes = _v_grid(data, v_cols, spec)
    terms = ([data.t_column] + [interaction_term(z, data) for z in roles.z]
             + [interaction_term(v, data) for v in v_cols])
    coef = fit.coefficients[[fit.index(n) for n in terms]]
    cov = fit.sub_covariance(terms)
    zbar, zlo, zhi = target_mean_limits(data, roles.z, spec.ci_level)
    res = v_outcome_formula(coef, cov, zbar, grid, spec.ci_level,
                            (zlo, zhi) if spec.z_uncertainty else None,
                            [f"mean_{v}_target" for v in v_cols], method)
    meta = {"terms": dict(zip(terms, coef.tolist())),
            "z_target_means": dict(zip(roles.z, zbar.tolist())),
            "v_rct_means": {v: float(data.rct_column(v).mean()) for v in v_cols},
            "ci_level": spec.ci_level, "covariance_kind": fit.covariance_kind}
    return SensitivityResult(res.method, res.parameter_names, res.grid, res.tate,
                             res.ci_lower, res.ci_upper, tuple(notes), meta)


def _three_way_terms(data: StackedDataset, roles: RoleMap, v_cols) -> list[str]:
    """V columns that are a Z column times another V column on the RCT rows."""
    found = []
    for c in v_cols:
        col = data.rct_column(c)
        for z in roles.z:
            for v in roles.v:
                if v != c and np.allclose(col, data.rct_column(z) * data.rct_column(v),
                                          rtol=1e-12, atol=1e-12):
                    found.append(f"{c} = {z}*{v}")
    return found


def _v_fit(data, roles, v_cols, weights=None, allow_three_way=False):
    others = [c for c in roles.v if c not in v_cols]
    if others:
        raise ValidationError(f"V-role columns {others} are not covered by the sensitivity grid")
    if not allow_three_way:
        products = _three_way_terms(data, roles, v_cols)
        if products:
            raise ValidationError(
                f"column(s) {products} would add a Z-by-V-by-T term; the V-case formulas "
                "assume no three-way interaction (set allow_three_way to treat the product "
                "as its own V moderator with its own target mean)")
    design = interaction_design(data, roles.x + roles.z + v_cols, roles.z + v_cols)
    if weights is None:
        return fit_wls(design, data.rct_y, None, MODEL_BASED)
    return fit_wls(design, data.rct_y, weights, SANDWICH)


def sens_v_outcome_model(data: StackedDataset, roles: RoleMap,
                         spec: VSensitivitySpec | None = None) -> SensitivityResult:
    """Outcome-model-based sensitivity analysis over the target mean of V.

    Fits the RCT outcome model with X, Z, V main effects and Z-by-T and
    V-by-T terms (no three-way terms), then evaluates the TATE formula at each
    grid value with a delta-method interval.
    """
    spec = spec or VSensitivitySpec()
    validate_roles(data, roles)
    v_cols = _v_columns(roles, spec)
    fit = _v_fit(data, roles, v_cols, allow_three_way=spec.allow_three_way)
    return _v_model_result(data, roles, spec, fit, v_cols, "outcome-model")


def sens_v_weighted_outcome_model(data: StackedDataset, roles: RoleMap,
                                  spec: VSensitivitySpec | None = None,
                                  weights: WeightVector | None = None) -> SensitivityResult:
    """Weighted-outcome-model-based sensitivity analysis.

    The RCT is weighted by the odds of target membership given the weighting
    columns (Z by default, optionally plus X), the same interaction model is
    fit by weighted least squares with a sandwich covariance, and the TATE
    formula is applied as in :func:`sens_v_outcome_model`. Precomputed
    ``weights`` skip the membership model.
    """
    spec = spec or VSensitivitySpec(method="weighted-outcome-model")
    validate_roles(data, roles)
    v_cols = _v_columns(roles, spec)
    wcols = list(spec.weighting_columns) if spec.weighting_columns else roles.z
    if not wcols:
        raise ValidationError("weighted-outcome-model analysis needs Z columns to weight on")
    if weights is None:
        weights = membership_weights(data, wcols, spec.spline_for_continuous, roles)
    fit = _v_fit(data, roles, v_cols, weights.weights, spec.allow_three_way)
    res = _v_model_result(data, roles, spec, fit, v_cols, "weighted-outcome-model")
    notes = list(res.warnings) + list(weights.warnings)
    bal = balance_report(data, wcols, weights.weights, roles)
    worst = bal.max_abs_smd_after()
    if worst > spec.balance_threshold:
        notes.append(f"post-weighting |SMD| {worst:.3f} exceeds {spec.balance_threshold:g}")
    meta = dict(res.metadata, weighting_columns=wcols, weight_formula=weights.formula,
                balance=bal.to_dict())
    return SensitivityResult(res.method, res.parameter_names, res.grid, res.tate,
                             res.ci_lower, res.ci_upper, tuple(notes), meta)


@dataclass(frozen=True)
class _Cells:
    """Sufficient statistics of the RCT by (arm, Z, V) for binary Z and V."""

    odds: np.ndarray       # P(S=0|Z=z)/P(S=1|Z=z), index z
    v_rate: np.ndarray     # P(V=1|S=1,Z=z), index z
    count: np.ndarray      # [arm, z, v]
    sum_y: np.ndarray
    sum_y2: np.ndarray


def _full_weighting_cells(data: StackedDataset, z_col: str, v_col: str) -> _Cells:
    for name in (z_col, v_col):
        if not data.is_binary(name):
            raise ValidationError(f"full-weighting analysis needs binary columns; {name!r} is not 0/1")
    zr, vr, t, y = data.rct_column(z_col), data.rct_column(v_col), data.rct_t, data.rct_y
    zt = data.target_column(z_col)
    odds, v_rate = np.empty(2), np.empty(2)
    for z in (0, 1):
        n1, n0 = np.sum(zr == z), np.sum(zt == z)
        if n1 == 0:
            raise EstimationError(f"no RCT rows with {z_col}={z}; P(S|Z) odds are inestimable")
        odds[z] = n0 / n1
        for v in (0, 1):
            if not np.any((zr == z) & (vr == v)):
                raise EstimationError(
                    f"empty RCT cell {v_col}={v}, {z_col}={z}: weight denominator is inestimable")
        v_rate[z] = np.mean(vr[zr == z])
    count, sum_y, sum_y2 = (np.zeros((2, 2, 2)) for _ in range(3))
    for a in (0, 1):
        for z in (0, 1):
            for v in (0, 1):
                m = (t == a) & (zr == z) & (vr == v)
                count[a, z, v] = m.sum()
                sum_y[a, z, v] = y[m].sum()
                sum_y2[a, z, v] = np.sum(y[m] ** 2)
    return _Cells(odds, v_rate, count, sum_y, sum_y2)


def _cell_weights(cells: _Cells, p1, p0) -> np.ndarray:
    """Weights per (grid point, z, v) -> array (k, 2, 2)."""
    p = np.column_stack([np.asarray(p0, float), np.asarray(p1, float)])  # index z
    w = np.empty((p.shape[0], 2, 2))
    for z in (0, 1):
        w[:, z, 1] = cells.odds[z] * p[:, z] / cells.v_rate[z]
        w[:, z, 0] = cells.odds[z] * (1 - p[:, z]) / (1 - cells.v_rate[z])
    return w


def full_weighting_weights(data: StackedDataset, z_column: str, v_column: str,
                           p1: float, p0: float) -> WeightVector:
    """Per-RCT-row weights for one (P(V=1|S=0,Z=1), P(V=1|S=0,Z=0)) pair."""
    for p in (p1, p0):
        if not 0.0 <= p <= 1.0:
            raise ValidationError(f"probabilities must lie in [0, 1], got {p}")
    cells = _full_weighting_cells(data, z_column, v_column)
    w = _cell_weights(cells, [p1], [p0])[0]
    zr = data.rct_column(z_column).astype(int)
    vr = data.rct_column(v_column).astype(int)
    return WeightVector(w[zr, vr], (z_column, v_column), "full-V-weight")


def sens_v_full_weighting(data: StackedDataset, roles: RoleMap,
                          spec: VSensitivitySpec | None = None) -> SensitivityResult:
    """Full-weighting sensitivity analysis for one binary Z and one binary V.

    Each RCT row is weighted by the Z-conditional odds of target membership
    times the ratio of the posited target prevalence of its V value to the
    RCT prevalence within its Z stratum. The Hájek weighted mean difference
    and its HC1 sandwich SE are computed from cell sums, so every grid point
    matches :func:`estimate_tate_weighted` on the corresponding weights.
    """
    spec = spec or VSensitivitySpec(method="full-weighting")
    validate_roles(data, roles)
    v_cols = _v_columns(roles, spec)
    z_cols = list(spec.weighting_columns) if spec.weighting_columns else roles.z
    if len(v_cols) != 1 or len(z_cols) != 1:
        raise ValidationError("full-weighting analysis is limited to exactly one binary Z "
                              "and one binary V")
    z_col, v_col = z_cols[0], v_cols[0]
    g1 = np.linspace(0, 1, DEFAULT_GRID_POINTS) if spec.grid is None else np.asarray(spec.grid, float).ravel()
    g0 = np.linspace(0, 1, DEFAULT_GRID_POINTS) if spec.grid2 is None else np.asarray(spec.grid2, float).ravel()
    if np.any((g1 < 0) | (g1 > 1)) or np.any((g0 < 0) | (g0 > 1)):
        raise ValidationError("prevalence grids must lie in [0, 1]")
    p1, p0 = (a.ravel() for a in np.meshgrid(g1, g0, indexing="ij"))
    cells = _full_weighting_cells(data, z_col, v_col)
    w = _cell_weights(cells, p1, p0)                       # (k, z, v)
    arm_w = np.einsum("kzv,azv->ka", w, cells.count)
    if np.any(arm_w <= 0):
        bad = np.flatnonzero(np.any(arm_w <= 0, axis=1))[0]
        raise DegenerateWeightsError(
            f"an arm has zero total weight at P(V=1|S=0,Z=1)={p1[bad]:g}, P(V=1|S=0,Z=0)={p0[bad]:g}")
    mu = np.einsum("kzv,azv->ka", w, cells.sum_y) / arm_w
    tate = mu[:, 1] - mu[:, 0]
    # sum of w^2 e^2 per arm from cell sums
    ss = (np.einsum("kzv,azv->ka", w**2, cells.sum_y2)
          - 2 * mu * np.einsum("kzv,azv->ka", w**2, cells.sum_y)
          + mu**2 * np.einsum("kzv,azv->ka", w**2, cells.count))
    n_pos = np.einsum("kzv,azv->k", (w > 0).astype(float), cells.count)
    var = (ss[:, 0] / arm_w[:, 0] ** 2 + ss[:, 1] / arm_w[:, 1] ** 2) * n_pos / (n_pos - 2)
    half = normal_quantile(spec.ci_level) * np.sqrt(np.clip(var, 0, None))
    meta = {"z_column": z_col, "v_column": v_col,
            "odds_s0_given_z": {"0": float(cells.odds[0]), "1": float(cells.odds[1])},
            "p_v1_rct_given_z": {"0": float(cells.v_rate[0]), "1": float(cells.v_rate[1])},
            "ci_level": spec.ci_level}
    return SensitivityResult("full-weighting", (f"p_{v_col}1_target_{z_col}1", f"p_{v_col}1_target_{z_col}0"),
                             np.column_stack([p1, p0]), tate, tate - half, tate + half, (), meta)


# --------------------------------------------------------------------------- #
# U case
# --------------------------------------------------------------------------- #


def _u_grid(spec: USensitivitySpec) -> np.ndarray:
    b = np.asarray(spec.beta_ut, dtype=float).ravel()
    d = np.asarray(spec.delta_u, dtype=float).ravel()
    if b.size == 0 or d.size == 0:
        raise ValidationError("both sensitivity-parameter grids must be non-empty")
    bb, dd = np.meshgrid(b, d, indexing="ij")
    return np.column_stack([bb.ravel(), dd.ravel()])


def _u_roles(roles: RoleMap) -> tuple[RoleMap, list[str]]:
    notes = []
    if roles.v:
        notes.append(f"V-role columns {roles.v} ignored in the U-case analysis")
        roles = RoleMap({c: r for c, r in roles.roles.items() if r != "V"})
    return roles, notes


def _z_gap(data: StackedDataset, z_cols: Sequence[str], weights=None) -> np.ndarray:
    out = []
    for name in z_cols:
        r = data.rct_column(name)
        rct_mean = r.mean() if weights is None else weighted_mean(r, weights)
        out.append(data.target_column(name).mean() - rct_mean)
    return np.array(out)


def sens_u_bias_formula(data: StackedDataset, roles: RoleMap,
                        spec: USensitivitySpec) -> SensitivityResult:
    """Bias-formula sensitivity analysis for the remaining composite moderator.

    ``TATE = SATE + b_zt . (zbar0 - zbar1) + beta_ut * delta_u`` with SATE the
    RCT difference in means and b_zt from the interaction outcome model. The
    interval uses the joint sandwich covariance of the two estimates and holds
    (beta_ut, delta_u) fixed.
    """
    roles, notes = _u_roles(roles)
    validate_roles(data, roles)
    grid = _u_grid(spec)
    t, y = data.rct_t, data.rct_y
    dm_design = interaction_design(data, [], [])
    dm = fit_wls(dm_design, y)
    sate = dm.coef(data.t_column)
    model_design = interaction_design(data, roles.x + roles.z, roles.z)
    model = fit_wls(model_design, y)
    zt_terms = [interaction_term(z, data) for z in roles.z]
    b_zt = model.coefficients[[model.index(n) for n in zt_terms]]
    gap = _z_gap(data, roles.z)
    # each block carries its own HC1 factor so the marginal variances match
    # the separate fits
    n = len(y)
    infl = np.column_stack([
        influence_rows(dm_design, y, dm.coefficients)[:, dm.index(data.t_column)]
        * np.sqrt(n / (n - dm_design.shape[1])),
        influence_rows(model_design, y, model.coefficients)[:, [model.index(name) for name in zt_terms]]
        * np.sqrt(n / (n - model_design.shape[1])),
    ])
    joint = infl.T @ infl
    c = np.concatenate([[1.0], gap])
    base = float(sate + b_zt @ gap)
    se = float(np.sqrt(max(c @ joint @ c, 0.0)))
    tate = base + grid[:, 0] * grid[:, 1]
    half = normal_quantile(spec.ci_level) * se
    meta = {"sate": float(sate), "z_adjusted_tate": base, "std_error": se,
            "beta_zt": dict(zip(zt_terms, b_zt.tolist())),
            "z_gap_target_minus_rct": dict(zip(roles.z, gap.tolist())),
            "ci_level": spec.ci_level}
    return SensitivityResult("bias-formula", ("beta_ut", "delta_u"), grid, tate,
                             tate - half, tate + half, tuple(notes), meta)


def sens_u_weighting_plus_bias(data: StackedDataset, roles: RoleMap,
                               spec: USensitivitySpec,
                               weights: WeightVector | None = None) -> SensitivityResult:
    """Weighting-plus-bias-formula sensitivity analysis.

    The RCT is weighted by the odds of target membership given all X and Z
    columns; the weighted mean difference (xzATE) is shifted by
    ``beta_ut * delta_u``. With ``residual_z_gap_correction`` the remaining
    Z mean gap after weighting is also corrected through b_zt; that variant
    reports point estimates only (intervals are NaN).
    """
    roles, notes = _u_roles(roles)
    validate_roles(data, roles)
    grid = _u_grid(spec)
    wcols = list(spec.weighting_columns) if spec.weighting_columns else roles.x + roles.z
    if not wcols:
        raise ValidationError("weighting-plus-bias analysis needs X or Z columns to weight on")
    if weights is None:
        weights = membership_weights(data, wcols, spec.spline_for_continuous, roles)
    notes += list(weights.warnings)
    xz = estimate_tate_weighted(data, weights, spec.ci_level, estimand="xzATE")
    gap = _z_gap(data, roles.z, weights.weights)
    meta = {"xzATE": xz.point, "std_error": xz.std_error, "weighting_columns": wcols,
            "z_gap_after_weighting": dict(zip(roles.z, gap.tolist())),
            "residual_z_gap_correction": spec.residual_z_gap_correction,
            "ci_level": spec.ci_level}
    base = xz.point
    if spec.residual_z_gap_correction and roles.z:
        model = fit_wls(interaction_design(data, roles.x + roles.z, roles.z), data.rct_y)
        zt_terms = [interaction_term(z, data) for z in roles.z]
        b_zt = model.coefficients[[model.index(n) for n in zt_terms]]
        base = float(xz.point + b_zt @ gap)
        meta["beta_zt"] = dict(zip(zt_terms, b_zt.tolist()))
        tate = base + grid[:, 0] * grid[:, 1]
        lower = upper = np.full(tate.shape, np.nan)
        notes.append("residual Z gap corrected: point estimates only, no confidence limits")
    else:
        tate = base + grid[:, 0] * grid[:, 1]
        half = normal_quantile(spec.ci_level) * xz.std_error
        lower, upper = tate - half, tate + half
        if roles.z:
            bal = balance_report(data, roles.z, weights.weights, roles)
            worst = bal.max_abs_smd_after()
            if worst > BALANCE_THRESHOLD:
                notes.append(f"post-weighting |SMD| for Z is {worst:.3f}; consider "
                             "residual_z_gap_correction")
    meta["adjusted_tate"] = base
    return SensitivityResult("weighting-plus-bias-formula", ("beta_ut", "delta_u"), grid, tate,
                             lower, upper, tuple(notes), meta)


def run_v(data: StackedDataset, roles: RoleMap, spec: VSensitivitySpec) -> SensitivityResult:
    return {"outcome-model": sens_v_outcome_model,
            "full-weighting": sens_v_full_weighting,
            "weighted-outcome-model": sens_v_weighted_outcome_model}[spec.method](data, roles, spec)


def run_u(data: StackedDataset, roles: RoleMap, spec: USensitivitySpec) -> SensitivityResult:
    return {"bias-formula": sens_u_bias_formula,
            "weighting-plus-bias-formula": sens_u_weighting_plus_bias}[spec.adjustment](data, roles, spec)
