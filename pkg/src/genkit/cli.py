"""Command-line interface: ``genkit estimate|weights|balance|sens|simulate``.

Every subcommand computes all of its results before touching the output
directory, then writes each file through a temporary file and an atomic
rename, finishing with ``manifest.json``. Reports are canonical JSON
(sorted keys, no timestamps) so identical inputs give identical bytes.

Exit codes: 0 success, 2 invalid input or configuration, 3 estimation
failure. Failures print one line to stderr.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import math
import os
import sys
import tempfile
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_csv, load_config, sample_means
from .errors import ConfigError, EstimationError, GenkitError, ValidationError
from .estimators import (balance_report, estimate_sate, estimate_tate_outcome_model,
                         estimate_tate_weighted, membership_weights)
from .sensitivity import (U_METHODS, V_METHODS, USensitivitySpec, VSensitivitySpec, parse_grid,
                          run_u, run_v)
from .simulation import OUTCOME_MODELS, load_scenario, run_models

SCHEMA_VERSION = 1
THREADS_ENV = "GENKIT_THREADS"

EXIT_OK, EXIT_INVALID, EXIT_ESTIMATION = 0, 2, 3


class UsageError(ValidationError):
    """Bad command-line usage (reported with exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------- #
# Output helpers
# --------------------------------------------------------------------------- #


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_outputs(out_dir: str, outputs: dict[str, str], manifest: dict) -> None:
    directory = Path(out_dir)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create output directory {out_dir}: {exc.strerror}") from None
    manifest = dict(manifest, outputs={name: sha256_bytes(text.encode()) for name, text
                                       in sorted(outputs.items())})
    for name, text in outputs.items():
        atomic_write(directory / name, text)
    atomic_write(directory / "manifest.json", dumps(manifest))


def _manifest(args, argv, seeds=None) -> dict:
    inputs = {}
    for attr in ("data", "scenario"):
        path = getattr(args, attr, None)
        if path:
            inputs[attr] = sha256_file(path)
    config = getattr(args, "config", None)
    return {"schema_version": SCHEMA_VERSION, "subcommand": args.command, "argv": list(argv),
            "tool_version": __version__,
            "config_digest": sha256_file(config) if config else None,
            "input_digests": inputs, "seeds": seeds,
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}


def _report(command: str, body: dict, notes) -> str:
    return dumps({"schema_version": SCHEMA_VERSION, "command": command, "tool_version": __version__,
                  **body, "warnings": sorted(dict.fromkeys(notes))})


# --------------------------------------------------------------------------- #
# Argument parsing
# --------------------------------------------------------------------------- #


def _columns(text: str | None) -> list[str] | None:
    if text is None:
        return None
    cols = [c.strip() for c in text.split(",") if c.strip()]
    if not cols:
        raise UsageError("column list is empty")
    return cols


def _level(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid CI level {text!r}") from None
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"CI level must lie in (0, 1), got {text}")
    return value


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="genkit", description="Generalize RCT treatment effects to a target "
                     "population, with sensitivity analyses for unobserved moderators.")
    parser.add_argument("--version", action="version", version=f"genkit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def data_args(p):
        p.add_argument("--data", required=True, help="stacked CSV (RCT rows S=1, target rows S=0)")
        p.add_argument("--config", required=True, help="TOML file with column names and roles")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--ci-level", type=_level, default=0.95)

    p = sub.add_parser("estimate", help="SATE and TATE estimates")
    data_args(p)
    p.add_argument("--method", choices=("outcome-model", "weighting"), default="outcome-model")
    p.add_argument("--weight-columns", help="comma-separated membership-model columns "
                   "(default: every X and Z column)")
    p.add_argument("--z-uncertainty", action="store_true",
                   help="widen the outcome-model interval for uncertainty in target Z means")

    p = sub.add_parser("weights", help="membership-odds weights for RCT rows")
    data_args(p)
    p.add_argument("--weight-columns")
    p.add_argument("--no-spline", action="store_true", help="enter continuous columns linearly")

    p = sub.add_parser("balance", help="covariate balance before and after weighting")
    data_args(p)
    p.add_argument("--weight-columns")
    p.add_argument("--balance-columns", help="columns to report (default: every X and Z column)")

    p = sub.add_parser("sens", help="sensitivity analysis over unobserved moderator means")
    data_args(p)
    p.add_argument("--case", choices=("v", "u"), required=True)
    p.add_argument("--method", help=f"V case: {', '.join(V_METHODS)}; "
                   f"U case: {', '.join(U_METHODS)}")
    p.add_argument("--grid", help="lo:hi:n; V target mean (V case), P(V=1|S=0,Z=1) "
                   "(full weighting) or beta_ut (U case)")
    p.add_argument("--grid2", help="lo:hi:n; P(V=1|S=0,Z=0) (full weighting) or delta_u (U case)")
    p.add_argument("--v-column", help="V column the grid refers to (default: the only V column)")
    p.add_argument("--weight-columns")
    p.add_argument("--allow-extrapolation", action="store_true")
    p.add_argument("--z-uncertainty", action="store_true")
    p.add_argument("--z-gap-correction", action="store_true",
                   help="U case, weighting-plus-bias-formula: correct the residual Z gap")

    p = sub.add_parser("simulate", help="Monte Carlo bias of the V-case methods")
    p.add_argument("--scenario", required=True, help="TOML scenario file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--iterations", type=_positive_int)
    p.add_argument("--threads", type=_positive_int)
    p.add_argument("--model", action="append", dest="models",
                   help="outcome model(s) to run on shared draws (default: the scenario's)")
    p.add_argument("--correlations", help="lo:hi:n sweep of the latent correlation")
    return parser


# --------------------------------------------------------------------------- #
# Subcommands
# --------------------------------------------------------------------------- #


def _load(args):
    load_config(args.config)           # surfaces config errors before data errors
    return load_csv(args.data, args.config)


def _weight_columns(args, roles) -> list[str]:
    cols = _columns(args.weight_columns)
    if cols is None:
        cols = roles.x + roles.z
    for c in cols:
        if c not in roles:
            raise ValidationError(f"weight column {c!r} has no role in the config")
        if roles.role(c) == "V":
            raise ValidationError(f"weight column {c!r} has role V (not observed in the target "
                                  "sample) and cannot enter the membership model")
    if not cols:
        raise ValidationError("no X or Z columns to weight on")
    return cols


def cmd_estimate(args, argv):
    data, roles = _load(args)
    notes = []
    sate = estimate_sate(data, ci_level=args.ci_level)
    body = {"sate": sate.to_dict()}
    if args.method == "outcome-model":
        est, fit = estimate_tate_outcome_model(data, roles, args.ci_level,
                                               z_uncertainty=args.z_uncertainty)
        body["model"] = {"coefficients": dict(zip(fit.column_names, fit.coefficients.tolist())),
                         "std_errors": dict(zip(fit.column_names, fit.std_errors.tolist()))}
    else:
        cols = _weight_columns(args, roles)
        weights = membership_weights(data, cols, roles=roles)
        est = estimate_tate_weighted(data, weights, args.ci_level)
        body["weights"] = {"columns": cols, "formula": weights.formula}
        body["balance"] = balance_report(data, roles.x + roles.z, weights, roles).to_dict()
    notes += est.warnings
    body["estimate"] = est.to_dict()
    return {"report.json": _report("estimate", body, notes)}, None


def cmd_weights(args, argv):
    data, roles = _load(args)
    cols = _weight_columns(args, roles)
    weights = membership_weights(data, cols, spline_for_continuous=not args.no_spline, roles=roles)
    rows = np.flatnonzero(data.rct) + 1
    lines = ["row,weight"] + [f"{r},{w!r}" for r, w in zip(rows.tolist(), weights.weights.tolist())]
    body = {"columns": cols, "formula": weights.formula, "n_rct": data.n_rct,
            "sum_weights": float(weights.weights.sum()),
            "coefficients": dict(zip(weights.fit.column_names, weights.fit.coefficients.tolist()))}
    return {"weights.csv": "\n".join(lines) + "\n",
            "report.json": _report("weights", body, weights.warnings)}, None


def cmd_balance(args, argv):
    data, roles = _load(args)
    cols = _weight_columns(args, roles)
    show = _columns(args.balance_columns) or roles.x + roles.z
    weights = membership_weights(data, cols, roles=roles)
    bal = balance_report(data, show, weights, roles)
    summary = sample_means(data, roles, weights)
    body = {"weight_columns": cols, "formula": weights.formula, "balance": bal.to_dict(),
            "summary": summary.to_dict()}
    return {"balance.json": _report("balance", body, weights.warnings)}, None


def cmd_sens(args, argv):
    data, roles = _load(args)
    grid = parse_grid(args.grid) if args.grid else None
    grid2 = parse_grid(args.grid2) if args.grid2 else None
    wcols = _weight_columns(args, roles) if args.weight_columns else None
    if args.case == "v":
        method = args.method or "outcome-model"
        if method not in V_METHODS:
            raise UsageError(f"V-case method must be one of {', '.join(V_METHODS)}")
        if grid2 is not None and method != "full-weighting":
            raise UsageError("--grid2 applies to the full-weighting method only")
        spec = VSensitivitySpec(method=method, grid=grid, grid2=grid2,
                                v_columns=[args.v_column] if args.v_column else None,
                                weighting_columns=wcols,
                                allow_extrapolation=args.allow_extrapolation,
                                z_uncertainty=args.z_uncertainty, ci_level=args.ci_level)
        result = run_v(data, roles, spec)
    else:
        method = args.method or "bias-formula"
        if method not in U_METHODS:
            raise UsageError(f"U-case method must be one of {', '.join(U_METHODS)}")
        if grid is None or grid2 is None:
            raise UsageError("the U case needs --grid (beta_ut) and --grid2 (delta_u)")
        spec = USensitivitySpec(beta_ut=grid, delta_u=grid2, adjustment=method,
                                residual_z_gap_correction=args.z_gap_correction,
                                weighting_columns=wcols, ci_level=args.ci_level)
        result = run_u(data, roles, spec)
    body = {"case": args.case, "result": result.to_dict()}
    return {"sens_grid.csv": result.to_csv(),
            "report.json": _report("sens", body, result.warnings)}, None


def cmd_simulate(args, argv):
    config, correlations = load_scenario(args.scenario)
    overrides = {"base_seed": args.seed}
    if args.iterations:
        overrides["n_iterations"] = args.iterations
    models = args.models or [config.outcome_model]
    for m in models:
        if m not in OUTCOME_MODELS:
            raise ConfigError(f"unknown outcome model {m!r}; expected one of {OUTCOME_MODELS}")
    if args.correlations:
        correlations = [round(float(r), 12) for r in parse_grid(args.correlations)]
    threads = args.threads or _default_threads()
    config = replace(config, outcome_model=models[0], **overrides)
    for m in models:
        replace(config, outcome_model=m)       # validates type compatibility up front
    curves = {m: None for m in models}
    for rho in correlations:
        out = run_models(replace(config, latent_correlation=rho), models, threads=threads)
        for m in models:
            curves[m] = out[m] if curves[m] is None else curves[m] + out[m]
    outputs = {}
    body = {"scenario": {"z_type": config.z_type, "v_type": config.v_type,
                         "n_rct": config.n_rct, "n_target": config.n_target,
                         "n_iterations": config.n_iterations, "base_seed": config.base_seed,
                         "correlations": correlations}, "models": {}}
    for m in models:
        name = "bias_curve.csv" if len(models) == 1 else f"bias_curve_{m}.csv"
        outputs[name] = curves[m].to_csv()
        body["models"][m] = [{"correlation": r.correlation, "method": r.method,
                              "model_spec": r.model_spec, "mean_bias": r.mean_bias,
                              "mc_se": r.mc_se, "n_ok": r.n_ok, "n_failed": r.n_failed}
                             for r in curves[m].rows]
    outputs["report.json"] = _report("simulate", body, [])
    return outputs, [args.seed]


COMMANDS = {"estimate": cmd_estimate, "weights": cmd_weights, "balance": cmd_balance,
            "sens": cmd_sens, "simulate": cmd_simulate}


GRID_OPTIONS = ("--grid", "--grid2", "--correlations")


def _attach_negative_values(argv: list[str]) -> list[str]:
    """Let grid options take values such as ``-2:2:41`` after a space."""
    out, i = [], 0
    while i < len(argv):
        if argv[i] in GRID_OPTIONS and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(_attach_negative_values(argv))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")        # warnings are carried in the reports
            outputs, seeds = COMMANDS[args.command](args, argv)
        _write_outputs(args.out, outputs, _manifest(args, argv, seeds))
    except ValidationError as exc:
        print(f"genkit: error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_INVALID
    except EstimationError as exc:
        print(f"genkit: estimation failed: {_one_line(exc)}", file=sys.stderr)
        return EXIT_ESTIMATION
    except GenkitError as exc:
        print(f"genkit: error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
