"""
Monte Carlo comparison of the outcome-model-based and weighted-outcome-model-based
V-case analyses under correct and misspecified outcome models.

Each iteration draws an RCT and a target sample, evaluates every method at
the true values of the unknown V-involving target means, and records the
error against the average true individual effect in that target sample.
Per-iteration random streams are keyed by (base_seed, iteration, purpose),
so results do not depend on the number of worker processes.
"""

from __future__ import annotations

import csv
import functools
import io
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .data import RoleMap, StackedDataset
from .errors import ConfigError, GenkitError, ScenarioError, ValidationError
from .estimators import membership_weights
from .numerics import mvn_sample
from .sensitivity import VSensitivitySpec, sens_v_outcome_model, sens_v_weighted_outcome_model

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

VARIABLE_TYPES = ("continuous", "binary")
OUTCOME_MODELS = ("A", "B1", "B2", "C1", "C2", "D1", "D2")
COMPATIBLE = {
    ("continuous", "continuous"): set(OUTCOME_MODELS),
    ("continuous", "binary"): {"A", "B1", "B2", "D1", "D2"},
    ("binary", "continuous"): {"A", "C1", "C2", "D1", "D2"},
    ("binary", "binary"): {"A", "D1", "D2"},
}
# third moderator (derived column) and the sign of its T interaction
THIRD_MODERATOR = {"A": None, "B1": ("Z2", 1.0), "B2": ("Z2", -1.0), "C1": ("V2", 1.0),
                   "C2": ("V2", -1.0), "D1": ("ZV", 1.0), "D2": ("ZV", -1.0)}
MIRROR = {"A": "A", "B1": "B2", "B2": "B1", "C1": "C2", "C2": "C1", "D1": "D2", "D2": "D1"}

THRESHOLD = float(stats.norm.ppf(0.75))    # binary prevalence .25 at latent mean 0
CONTINUOUS_TARGET_MEAN = 0.5
NOISE_SD = 2.0                             # N(0, 4) read as variance 4
MAX_FAILURE_RATE = 0.01

STREAM_RCT, STREAM_TARGET = 1, 2

METHODS = ("outcome-model", "weighted-outcome-model")
MODEL_SPECS = ("correct", "misspecified")


@dataclass(frozen=True)
class ScenarioConfig:
    z_type: str = "continuous"
    v_type: str = "continuous"
    latent_correlation: float = 0.0
    outcome_model: str = "A"
    n_rct: int = 400
    n_target: int = 5000
    n_iterations: int = 2000
    base_seed: int = 0

    def __post_init__(self):
        for name in ("z_type", "v_type"):
            if getattr(self, name) not in VARIABLE_TYPES:
                raise ConfigError(f"{name} must be one of {VARIABLE_TYPES}, got {getattr(self, name)!r}")
        if self.outcome_model not in OUTCOME_MODELS:
            raise ConfigError(f"unknown outcome model {self.outcome_model!r}; "
                              f"expected one of {OUTCOME_MODELS}")
        if self.outcome_model not in COMPATIBLE[(self.z_type, self.v_type)]:
            raise ConfigError(f"outcome model {self.outcome_model} is not used with "
                              f"{self.z_type} Z and {self.v_type} V")
        if not -1.0 < self.latent_correlation < 1.0:
            raise ConfigError("latent_correlation must lie in (-1, 1)")
        if self.n_rct < 20 or self.n_target < 20 or self.n_iterations < 1:
            raise ConfigError("sample sizes must be at least 20 and n_iterations at least 1")

    @property
    def third(self):
        return THIRD_MODERATOR[self.outcome_model]


@dataclass(frozen=True)
class MethodSpec:
    method: str
    model_spec: str

    def __post_init__(self):
        if self.method not in METHODS or self.model_spec not in MODEL_SPECS:
            raise ConfigError(f"unknown method spec {self.method}/{self.model_spec}")

    @property
    def label(self) -> str:
        return f"{self.method}/{self.model_spec}"


def default_method_specs(config: ScenarioConfig) -> list[MethodSpec]:
    specs = ["correct"] if config.third is None else list(MODEL_SPECS)
    return [MethodSpec(m, s) for m in METHODS for s in specs]


# --------------------------------------------------------------------------- #
# Data generation
# --------------------------------------------------------------------------- #


def _stream(config: ScenarioConfig, index: int, purpose: int) -> np.random.Generator:
    seq = np.random.SeedSequence([config.base_seed, index, purpose])
    return np.random.Generator(np.random.PCG64(seq))


def _latent_means(config: ScenarioConfig, target: bool) -> np.ndarray:
    out = []
    for kind in (config.z_type, config.v_type):
        if kind == "binary":
            out.append(THRESHOLD if target else 0.0)
        else:
            out.append(CONTINUOUS_TARGET_MEAN if target else 0.0)
    return np.array(out)


def _draw_covariates(config: ScenarioConfig, n: int, target: bool, rng):
    x = rng.standard_normal(n)
    latent = mvn_sample(_latent_means(config, target), config.latent_correlation, n, rng)
    z, v = latent[:, 0], latent[:, 1]
    if config.z_type == "binary":
        z = (z > THRESHOLD).astype(float)
    if config.v_type == "binary":
        v = (v > THRESHOLD).astype(float)
    return x, z, v


def _third_values(name: str | None, z, v):
    if name is None:
        return np.zeros_like(z)
    return {"Z2": z * z, "V2": v * v, "ZV": z * v}[name]


def individual_effects(config: ScenarioConfig, z, v) -> np.ndarray:
    """True treatment effect ``1 + Z + V (+/- third moderator)`` per unit."""
    effect = 1.0 + z + v
    if config.third is not None:
        name, sign = config.third
        effect = effect + sign * _third_values(name, z, v)
    return effect


@dataclass(frozen=True, eq=False)
class _Draw:
    """Outcome-model-free part of one iteration: covariates, T and noise."""

    x1: np.ndarray
    z1: np.ndarray
    v1: np.ndarray
    t: np.ndarray
    noise: np.ndarray
    x0: np.ndarray
    z0: np.ndarray
    v0: np.ndarray


def _draw(config: ScenarioConfig, index: int) -> _Draw:
    rng = _stream(config, index, STREAM_RCT)
    x1, z1, v1 = _draw_covariates(config, config.n_rct, False, rng)
    t = (rng.random(config.n_rct) < 0.5).astype(float)
    noise = rng.normal(0.0, NOISE_SD, config.n_rct)
    rng = _stream(config, index, STREAM_TARGET)
    x0, z0, v0 = _draw_covariates(config, config.n_target, True, rng)
    return _Draw(x1, z1, v1, t, noise, x0, z0, v0)


def _assemble(config: ScenarioConfig, d: _Draw) -> tuple[StackedDataset, float]:
    y = d.x1 + d.z1 + d.v1 + d.t * individual_effects(config, d.z1, d.v1) + d.noise
    true_tate = float(individual_effects(config, d.z0, d.v0).mean())
    nan0 = np.full(d.x0.size, np.nan)
    data = StackedDataset(
        s=np.concatenate([np.ones(d.x1.size), np.zeros(d.x0.size)]),
        t=np.concatenate([d.t, nan0]), y=np.concatenate([y, nan0]),
        covariates={"X": np.concatenate([d.x1, d.x0]), "Z": np.concatenate([d.z1, d.z0]),
                    "V": np.concatenate([d.v1, nan0])})
    return data, true_tate


def generate_iteration(config: ScenarioConfig, iteration_index: int) -> tuple[StackedDataset, float]:
    """One RCT + target draw and the target-sample mean of the true effects.

    The covariates, treatment and noise depend only on the variable types,
    correlation, sample sizes and (base_seed, iteration_index), so draws for
    different outcome models share them.
    """
    return _assemble(config, _draw(config, iteration_index))


def _moments(kind: str, latent_mean: float) -> tuple[float, float]:
    """E[W] and E[W^2] of a unit-variance latent normal, possibly dichotomised."""
    if kind == "binary":
        p = float(stats.norm.sf(THRESHOLD - latent_mean))
        return p, p
    return latent_mean, latent_mean**2 + 1.0


def target_moments(config: ScenarioConfig) -> dict[str, float]:
    """Closed-form target means of Z, V, Z^2, V^2 and ZV under the generator."""
    return dict(_target_moments(config.z_type, config.v_type, config.latent_correlation))


@functools.lru_cache(maxsize=256)
def _target_moments(z_type: str, v_type: str, rho: float) -> tuple:
    config = ScenarioConfig(z_type, v_type, rho)
    mz, mv = _latent_means(config, target=True)
    ez, ez2 = _moments(config.z_type, mz)
    ev, ev2 = _moments(config.v_type, mv)
    types = (config.z_type, config.v_type)
    if types == ("continuous", "continuous"):
        ezv = mz * mv + rho
    elif types == ("binary", "binary"):
        ezv = float(stats.multivariate_normal.cdf(
            [mz - THRESHOLD, mv - THRESHOLD], cov=[[1, rho], [rho, 1]]))
    elif types == ("continuous", "binary"):
        a = THRESHOLD - mv
        ezv = mz * stats.norm.sf(a) + rho * stats.norm.pdf(a)
    else:
        a = THRESHOLD - mz
        ezv = mv * stats.norm.sf(a) + rho * stats.norm.pdf(a)
    return tuple({"Z": ez, "V": ev, "Z2": ez2, "V2": ev2, "ZV": float(ezv)}.items())


def closed_form_tate(config: ScenarioConfig) -> float:
    m = target_moments(config)
    tate = 1.0 + m["Z"] + m["V"]
    if config.third is not None:
        name, sign = config.third
        tate += sign * m[name]
    return tate


# --------------------------------------------------------------------------- #
# Methods
# --------------------------------------------------------------------------- #


def _analysis_inputs(config: ScenarioConfig, data: StackedDataset, model_spec: str):
    """Dataset with the derived third-moderator column and its roles."""
    roles = {"X": "X", "Z": "Z", "V": "V"}
    if model_spec == "correct" and config.third is not None:
        name, _ = config.third
        z, v = data.column("Z"), data.column("V")
        data = data.with_covariates({name: _third_values(name, z, v)})
        roles[name] = "Z" if name == "Z2" else "V"
    return data, RoleMap(roles)


def _estimate(config, data, roles, method, weights, truth) -> float:
    v_cols = roles.v
    grid = np.array([[truth[c] for c in v_cols]])
    spec = VSensitivitySpec(method=method, grid=grid, v_columns=v_cols,
                            allow_extrapolation=True, weighting_columns=["Z"],
                            allow_three_way=True)
    if method == "outcome-model":
        res = sens_v_outcome_model(data, roles, spec)
    else:
        res = sens_v_weighted_outcome_model(data, roles, spec, weights=weights)
    return float(res.tate[0])


@dataclass(frozen=True)
class IterationResult:
    index: int
    true_tate: float
    estimates: dict            # MethodSpec.label -> estimate (NaN when failed)
    failures: dict = field(default_factory=dict)


def evaluate_models(config: ScenarioConfig, index: int, outcome_models: Sequence[str],
                    method_specs: dict) -> dict[str, IterationResult]:
    """Evaluate several outcome models on one shared draw.

    ``method_specs`` maps each outcome model to its method specs. Membership
    weights depend only on Z, so they are fit once per draw.
    """
    draw = _draw(config, index)
    weights, weight_error = None, None
    out = {}
    for model in outcome_models:
        cfg = replace(config, outcome_model=model)
        data, true_tate = _assemble(cfg, draw)
        truth = target_moments(cfg)
        specs = method_specs[model]
        if weights is None and weight_error is None and any(
                s.method == "weighted-outcome-model" for s in specs):
            try:
                weights = membership_weights(data, ["Z"], spline_for_continuous=True)
            except GenkitError as exc:
                weight_error = str(exc)
        estimates, failures = {}, {}
        for spec in specs:
            try:
                if spec.method == "weighted-outcome-model" and weights is None:
                    raise ScenarioError(weight_error or "weights unavailable")
                d, roles = _analysis_inputs(cfg, data, spec.model_spec)
                estimates[spec.label] = _estimate(cfg, d, roles, spec.method, weights, truth)
            except GenkitError as exc:
                estimates[spec.label] = float("nan")
                failures[spec.label] = str(exc)
        out[model] = IterationResult(index, true_tate, estimates, failures)
    return out


def evaluate_iteration(config: ScenarioConfig, index: int,
                       method_specs: Sequence[MethodSpec]) -> IterationResult:
    model = config.outcome_model
    return evaluate_models(config, index, [model], {model: list(method_specs)})[model]


def _evaluate_chunk(args) -> list[dict[str, IterationResult]]:
    config, indices, models, specs = args
    return [evaluate_models(config, i, models, specs) for i in indices]


def run_iterations(config: ScenarioConfig, method_specs: dict,
                   threads: int = 1, chunk_size: int = 50) -> dict[str, list[IterationResult]]:
    """Evaluate every iteration for each outcome model in ``method_specs``.

    Results are in index order regardless of ``threads``.
    """
    models = list(method_specs)
    indices = list(range(config.n_iterations))
    chunks = [(config, indices[i:i + chunk_size], models, method_specs)
              for i in range(0, len(indices), chunk_size)]
    if threads <= 1 or len(chunks) == 1:
        parts = [_evaluate_chunk(c) for c in chunks]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_evaluate_chunk, chunks))
    flat = sorted((r for part in parts for r in part), key=lambda r: next(iter(r.values())).index)
    return {m: [r[m] for r in flat] for m in models}


# --------------------------------------------------------------------------- #
# Aggregation
# --------------------------------------------------------------------------- #


@dataclass(frozen=True, eq=False)
class BiasRow:
    correlation: float
    method: str
    model_spec: str
    mean_bias: float
    mc_se: float
    n_ok: int
    n_failed: int
    errors: np.ndarray = field(repr=False, default=None)

    @property
    def label(self) -> str:
        return f"{self.method}/{self.model_spec}"


@dataclass(frozen=True, eq=False)
class BiasCurve:
    """Mean bias and Monte Carlo SE per (correlation, method, model spec)."""

    rows: tuple[BiasRow, ...]
    outcome_model: str = ""
    header = ("correlation", "method", "model_spec", "mean_bias", "mc_se", "n_ok", "n_failed")

    def get(self, method: str, model_spec: str, correlation: float | None = None) -> BiasRow:
        for row in self.rows:
            if row.method == method and row.model_spec == model_spec and (
                    correlation is None or math.isclose(row.correlation, correlation, abs_tol=1e-12)):
                return row
        raise KeyError((method, model_spec, correlation))

    def __add__(self, other: "BiasCurve") -> "BiasCurve":
        return BiasCurve(self.rows + other.rows, self.outcome_model or other.outcome_model)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        for r in self.rows:
            writer.writerow([repr(float(r.correlation)), r.method, r.model_spec,
                             repr(float(r.mean_bias)), repr(float(r.mc_se)), r.n_ok, r.n_failed])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def aggregate(config: ScenarioConfig, results: Sequence[IterationResult],
              method_specs: Sequence[MethodSpec]) -> BiasCurve:
    rows = []
    truth = np.array([r.true_tate for r in results])
    for spec in method_specs:
        est = np.array([r.estimates[spec.label] for r in results])
        err = est - truth
        ok = np.isfinite(err)
        n_ok, n_failed = int(ok.sum()), int((~ok).sum())
        if n_failed > MAX_FAILURE_RATE * len(results):
            sample = next(r.failures[spec.label] for r in results if spec.label in r.failures)
            raise ScenarioError(f"{n_failed} of {len(results)} iterations failed for "
                                f"{spec.label} (first: {sample})")
        # errors keep NaN placeholders so paired comparisons line up by index
        good = err[ok]
        mean = float(good.mean()) if n_ok else float("nan")
        se = float(good.std(ddof=1) / np.sqrt(n_ok)) if n_ok > 1 else float("nan")
        rows.append(BiasRow(config.latent_correlation, spec.method, spec.model_spec,
                            mean, se, n_ok, n_failed, err))
    return BiasCurve(tuple(rows), config.outcome_model)


def _specs_for(config: ScenarioConfig, method_specs) -> list[MethodSpec]:
    specs = list(method_specs) if method_specs else default_method_specs(config)
    if config.third is None:
        if method_specs and any(s.model_spec == "misspecified" for s in specs):
            raise ConfigError("model A has no misspecified analysis model")
    return specs


def run_scenario(config: ScenarioConfig, method_specs: Sequence[MethodSpec] | None = None,
                 threads: int = 1) -> BiasCurve:
    """Mean bias of each method spec over ``config.n_iterations`` draws."""
    _specs_for(config, method_specs)
    return run_models(config, [config.outcome_model], method_specs, threads)[config.outcome_model]


def run_models(config: ScenarioConfig, outcome_models: Sequence[str],
               method_specs: Sequence[MethodSpec] | None = None,
               threads: int = 1) -> dict[str, BiasCurve]:
    """Run several outcome models on shared draws (common random numbers).

    Each model's curve equals what :func:`run_scenario` gives for that model
    alone. Without explicit ``method_specs`` each model gets its defaults;
    with them, misspecified specs are dropped for model A.
    """
    specs = {}
    for model in dict.fromkeys(outcome_models):
        cfg = replace(config, outcome_model=model)
        if method_specs and cfg.third is None:
            specs[model] = [s for s in method_specs if s.model_spec == "correct"]
        else:
            specs[model] = _specs_for(cfg, method_specs)
    results = run_iterations(config, specs, threads)
    return {m: aggregate(replace(config, outcome_model=m), results[m], specs[m]) for m in specs}


def run_sweep(config: ScenarioConfig, correlations: Iterable[float],
              method_specs: Sequence[MethodSpec] | None = None, threads: int = 1) -> BiasCurve:
    curve = BiasCurve((), config.outcome_model)
    for rho in correlations:
        curve = curve + run_scenario(replace(config, latent_correlation=float(rho)),
                                     method_specs, threads)
    return curve


def combined_se(a: BiasRow, b: BiasRow, paired: bool, sign: float = -1.0) -> float:
    """MC standard error of ``mean(a) + sign * mean(b)``.

    Paired rows (same draws) use the SD of the per-iteration combination;
    independent rows add variances.
    """
    if paired:
        d = a.errors + sign * b.errors
        d = d[np.isfinite(d)]
        return float(d.std(ddof=1) / np.sqrt(d.size))
    return float(np.hypot(a.mc_se, b.mc_se))


@dataclass(frozen=True)
class MirrorRow:
    correlation: float
    method: str
    model_spec: str
    bias_positive: float
    bias_negative: float
    combined_se: float
    passed: bool


@dataclass(frozen=True)
class MirrorReport:
    rows: tuple[MirrorRow, ...]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)


def mirror_check(config_positive: ScenarioConfig, config_negative: ScenarioConfig,
                 method_specs: Sequence[MethodSpec] | None = None, threads: int = 1,
                 correlations: Iterable[float] | None = None,
                 tolerance_se: float = 3.0) -> MirrorReport:
    """Check that sign-flipped third moderators give sign-flipped biases."""
    if MIRROR[config_positive.outcome_model] != config_negative.outcome_model:
        raise ConfigError(f"{config_positive.outcome_model} and {config_negative.outcome_model} "
                          "are not a mirror pair")
    if replace(config_negative, outcome_model=config_positive.outcome_model,
               base_seed=config_positive.base_seed) != config_positive:
        raise ConfigError("mirror configs must differ only in the outcome model (and seed)")
    paired = config_positive.base_seed == config_negative.base_seed
    rhos = [config_positive.latent_correlation] if correlations is None else list(correlations)
    pos = run_sweep(config_positive, rhos, method_specs, threads)
    neg = run_sweep(config_negative, rhos, method_specs, threads)
    rows = []
    for a in pos.rows:
        b = neg.get(a.method, a.model_spec, a.correlation)
        se = combined_se(a, b, paired, sign=+1.0)
        rows.append(MirrorRow(a.correlation, a.method, a.model_spec, a.mean_bias, b.mean_bias,
                              se, abs(a.mean_bias + b.mean_bias) < tolerance_se * se))
    return MirrorReport(tuple(rows))


# --------------------------------------------------------------------------- #
# Scenario files
# --------------------------------------------------------------------------- #


def load_scenario(path) -> tuple[ScenarioConfig, list[float]]:
    """Read a TOML scenario. ``correlations`` (list) overrides ``latent_correlation``."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse scenario {path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc}") from None
    allowed = {"z_type", "v_type", "latent_correlation", "correlations", "outcome_model",
               "n_rct", "n_target", "n_iterations", "base_seed"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    correlations = raw.pop("correlations", None)
    try:
        config = ScenarioConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if correlations is None:
        correlations = [config.latent_correlation]
    if not isinstance(correlations, list) or not correlations:
        raise ConfigError("correlations must be a non-empty list")
    for rho in correlations:
        if not isinstance(rho, (int, float)) or not -1 < rho < 1:
            raise ValidationError(f"invalid correlation {rho!r}")
    return config, [float(r) for r in correlations]
