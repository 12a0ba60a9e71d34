"""Stacked RCT + target-sample data, covariate roles, and summary statistics."""

from __future__ import annotations

import functools

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from .errors import ConfigError, DegenerateWeightsError, ValidationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

ROLES = ("X", "Z", "V")
NA_TOKEN = "NA"


def _rows(idx: np.ndarray, limit: int = 10) -> str:
    # 1-based data-row numbers, header excluded
    shown = (np.asarray(idx)[:limit] + 1).tolist()
    more = f" (+{len(idx) - limit} more)" if len(idx) > limit else ""
    return f"{shown}{more}"


@dataclass(frozen=True)
class RoleMap:
    """Role of each covariate: X (non-moderating), Z (moderator in both samples),
    V (moderator observed in the RCT only)."""

    roles: Mapping[str, str]

    def __post_init__(self):
        roles = dict(self.roles)
        bad = {c: r for c, r in roles.items() if r not in ROLES}
        if bad:
            raise ValidationError(f"roles must be one of {ROLES}; got {bad}")
        object.__setattr__(self, "roles", roles)

    def columns(self, role: str) -> list[str]:
        return [c for c, r in self.roles.items() if r == role]

    @property
    def x(self) -> list[str]:
        return self.columns("X")

    @property
    def z(self) -> list[str]:
        return self.columns("Z")

    @property
    def v(self) -> list[str]:
        return self.columns("V")

    def role(self, column: str) -> str:
        try:
            return self.roles[column]
        except KeyError:
            raise ValidationError(f"column {column!r} has no role") from None

    def __contains__(self, column) -> bool:
        return column in self.roles

    def with_roles(self, **extra: str) -> "RoleMap":
        return RoleMap({**self.roles, **extra})


@dataclass(frozen=True, eq=False)
class StackedDataset:
    """RCT rows (S=1, with T and Y) stacked on target rows (S=0, covariates only).

    Arrays are read-only after construction. Missing values are NaN; T and Y
    are NaN on every target row.
    """

    s: np.ndarray
    t: np.ndarray
    y: np.ndarray
    covariates: Mapping[str, np.ndarray]
    s_column: str = "S"
    t_column: str = "T"
    y_column: str = "Y"

    def __post_init__(self):
        s = np.asarray(self.s, dtype=float).ravel()
        n = s.size
        if np.any(np.isnan(s)) or not np.all((s == 0) | (s == 1)):
            raise ValidationError(f"{self.s_column} must be 0/1 on every row; bad rows "
                                  f"{_rows(np.flatnonzero(~((s == 0) | (s == 1))))}")
        s = s.astype(np.int8)
        t = np.asarray(self.t, dtype=float).ravel()
        y = np.asarray(self.y, dtype=float).ravel()
        if t.size != n or y.size != n:
            raise ValidationError("S, T and Y have different lengths")
        rct = s == 1
        bad_t = np.flatnonzero(rct & ~((t == 0) | (t == 1)))
        if bad_t.size:
            raise ValidationError(f"{self.t_column} must be 0/1 on RCT rows; bad rows {_rows(bad_t)}")
        bad_y = np.flatnonzero(rct & ~np.isfinite(y))
        if bad_y.size:
            raise ValidationError(f"{self.y_column} missing on RCT rows {_rows(bad_y)}")
        carried = np.flatnonzero(~rct & (~np.isnan(t) | ~np.isnan(y)))
        if carried.size:
            raise ValidationError(f"target rows must not carry {self.t_column} or "
                                  f"{self.y_column}; rows {_rows(carried)}")
        covs = {}
        for name, col in self.covariates.items():
            arr = np.array(col, dtype=float).ravel()
            if arr.size != n:
                raise ValidationError(f"covariate {name!r} has length {arr.size}, expected {n}")
            arr.setflags(write=False)
            covs[str(name)] = arr
        for arr in (s, t, y):
            arr.setflags(write=False)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "covariates", covs)

    # ---- shape -----------------------------------------------------------

    @functools.cached_property
    def rct(self) -> np.ndarray:
        mask = self.s == 1
        mask.setflags(write=False)
        return mask

    @functools.cached_property
    def target(self) -> np.ndarray:
        mask = self.s == 0
        mask.setflags(write=False)
        return mask

    @property
    def n(self) -> int:
        return self.s.size

    @property
    def n_rct(self) -> int:
        return int(self.rct.sum())

    @property
    def n_target(self) -> int:
        return int(self.target.sum())

    @property
    def columns(self) -> list[str]:
        return list(self.covariates)

    # ---- access ----------------------------------------------------------

    def column(self, name: str) -> np.ndarray:
        try:
            return self.covariates[name]
        except KeyError:
            raise ValidationError(f"unknown covariate {name!r}") from None

    def rct_column(self, name: str) -> np.ndarray:
        if name not in self._rct_cache:
            col = self.column(name)[self.rct]
            col.setflags(write=False)
            self._rct_cache[name] = col
        return self._rct_cache[name]

    @functools.cached_property
    def _rct_cache(self) -> dict:
        return {}

    def target_column(self, name: str) -> np.ndarray:
        return self.column(name)[self.target]

    @functools.cached_property
    def rct_t(self) -> np.ndarray:
        t = self.t[self.rct]
        t.setflags(write=False)
        return t

    @functools.cached_property
    def rct_y(self) -> np.ndarray:
        y = self.y[self.rct]
        y.setflags(write=False)
        return y

    def is_binary(self, name: str) -> bool:
        col = self.column(name)
        col = col[~np.isnan(col)]
        return bool(np.all((col == 0) | (col == 1)))

    def with_covariates(self, extra: Mapping[str, np.ndarray]) -> "StackedDataset":
        return StackedDataset(self.s, self.t, self.y, {**self.covariates, **extra},
                              self.s_column, self.t_column, self.y_column)

    # ---- round trip ------------------------------------------------------

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({self.s_column: self.s.astype(int),
                              self.t_column: self.t, self.y_column: self.y})
        for name, col in self.covariates.items():
            frame[name] = col
        return frame

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, na_rep=NA_TOKEN, float_format="%.17g")

    def __eq__(self, other) -> bool:
        if not isinstance(other, StackedDataset):
            return NotImplemented
        if list(self.covariates) != list(other.covariates):
            return False
        pairs = [(self.s, other.s), (self.t, other.t), (self.y, other.y)]
        pairs += [(self.covariates[k], other.covariates[k]) for k in self.covariates]
        return all(a.shape == b.shape and np.array_equal(a, b, equal_nan=True) for a, b in pairs)

    __hash__ = None


# --------------------------------------------------------------------------- #
# Configuration and loading
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class DataConfig:
    """Column names, covariate roles, and optional row filter / categorical expansion.

    ``filters`` keeps rows where every named column equals the given value.
    ``expand`` maps a categorical column to its reference level; the column is
    replaced by one 0/1 indicator per non-reference level, named
    ``<column>_<level>``, which inherit the column's role.
    """

    s_column: str = "S"
    t_column: str = "T"
    y_column: str = "Y"
    roles: Mapping[str, str] = field(default_factory=dict)
    filters: Mapping[str, object] = field(default_factory=dict)
    expand: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, raw: Mapping) -> "DataConfig":
        known = {"s_column", "t_column", "y_column", "roles", "filter", "expand"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        roles = raw.get("roles", {})
        if not isinstance(roles, Mapping) or not roles:
            raise ConfigError("config must assign at least one role, e.g. roles.z1 = \"Z\"")
        return cls(s_column=raw.get("s_column", "S"), t_column=raw.get("t_column", "T"),
                   y_column=raw.get("y_column", "Y"),
                   roles={str(k): str(v).upper() for k, v in roles.items()},
                   filters=dict(raw.get("filter", {})), expand=dict(raw.get("expand", {})))


def load_config(path) -> DataConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return DataConfig.from_mapping(raw)


def _coerce_numeric(frame: pd.DataFrame, column: str) -> np.ndarray:
    # float() parses decimal strings with correct rounding, so values written
    # with 17 significant digits read back bit-for-bit
    raw = frame[column].to_numpy(dtype=object)
    out = np.full(raw.size, np.nan)
    bad = []
    for i, value in enumerate(raw):
        if isinstance(value, float) and np.isnan(value):
            continue                       # missing
        try:
            out[i] = float(value)
        except (TypeError, ValueError):
            bad.append(i)
            continue
        if not np.isfinite(out[i]):
            bad.append(i)
    if bad:
        raise ValidationError(f"column {column!r} has non-numeric values at rows {_rows(np.array(bad))}")
    return out


def _expand(frame: pd.DataFrame, column: str, reference, roles: dict) -> pd.DataFrame:
    levels = sorted(frame[column].dropna().astype(str).unique())
    if str(reference) not in levels:
        raise ConfigError(f"reference level {reference!r} not found in column {column!r}")
    role = roles.pop(column)
    raw = frame[column]
    for level in levels:
        if level == str(reference):
            continue
        name = f"{column}_{level}"
        frame[name] = np.where(raw.isna(), np.nan, (raw.astype(str) == level).astype(float))
        roles[name] = role
    return frame.drop(columns=[column])


def validate_roles(data: StackedDataset, roles: RoleMap) -> None:
    """Check each covariate's missingness pattern against its role."""
    rct, target = data.rct, data.target
    for name, role in roles.roles.items():
        col = data.column(name)
        miss = np.isnan(col)
        if role in ("X", "Z"):
            where = np.flatnonzero(miss)
            if where.size:
                raise ValidationError(
                    f"column {name!r} (role {role}) has missing values at rows {_rows(where)}")
        else:
            bad = np.flatnonzero(rct & miss)
            if bad.size:
                raise ValidationError(f"column {name!r} (role V) is missing on RCT rows {_rows(bad)}")
            seen = np.flatnonzero(target & ~miss)
            if seen.size:
                raise ValidationError(
                    f"column {name!r} has role V but is observed on target rows {_rows(seen)}; "
                    f"a moderator observed in both samples should have role Z")


def load_csv(data_path, config) -> tuple[StackedDataset, RoleMap]:
    """Read a stacked CSV (header row, ``NA`` for missing) and validate it.

    ``config`` is a :class:`DataConfig`, a mapping with the same keys, or a
    path to a TOML file.
    """
    if isinstance(config, (str, Path)):
        config = load_config(config)
    elif not isinstance(config, DataConfig):
        config = DataConfig.from_mapping(config)
    try:
        frame = pd.read_csv(data_path, na_values=[NA_TOKEN], keep_default_na=False, dtype=str)
    except OSError as exc:
        raise ValidationError(f"cannot read data {data_path}: {exc.strerror or exc}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise ValidationError(f"cannot parse data {data_path}: {exc}") from None
    frame = frame.apply(lambda c: c.str.strip() if c.dtype == object else c)
    frame = frame.replace({"": np.nan, NA_TOKEN: np.nan})

    needed = [config.s_column, config.t_column, config.y_column, *config.roles,
              *config.filters, *config.expand]
    missing = [c for c in dict.fromkeys(needed) if c not in frame.columns]
    if missing:
        raise ValidationError(f"config names columns not in {data_path}: {missing}")

    for column, value in config.filters.items():
        frame = frame[frame[column] == str(value)]
    frame = frame.reset_index(drop=True)

    roles = dict(config.roles)
    for column, reference in config.expand.items():
        if column not in roles:
            raise ConfigError(f"expanded column {column!r} needs a role")
        frame = _expand(frame, column, reference, roles)

    covs = {name: _coerce_numeric(frame, name) for name in roles}
    data = StackedDataset(_coerce_numeric(frame, config.s_column),
                          _coerce_numeric(frame, config.t_column),
                          _coerce_numeric(frame, config.y_column), covs,
                          config.s_column, config.t_column, config.y_column)
    role_map = RoleMap(roles)
    validate_roles(data, role_map)
    return data, role_map


# --------------------------------------------------------------------------- #
# Summaries
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ColumnSummary:
    mean: float
    sd: float
    min: float
    max: float
    n: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "min": self.min, "max": self.max, "n": self.n}


@dataclass(frozen=True)
class SummaryTable:
    """Per-sample column summaries; ``rct_weighted`` is present when weights were given."""

    rct: Mapping[str, ColumnSummary]
    target: Mapping[str, ColumnSummary]
    rct_weighted: Mapping[str, ColumnSummary] | None = None

    def mean(self, column: str, sample: str = "target") -> float:
        table = {"rct": self.rct, "target": self.target, "rct_weighted": self.rct_weighted}[sample]
        if table is None:
            raise ValidationError("no weighted summary available")
        return table[column].mean

    def means(self, columns: Iterable[str], sample: str = "target") -> np.ndarray:
        return np.array([self.mean(c, sample) for c in columns])

    def to_dict(self) -> dict:
        out = {"rct": {k: v.to_dict() for k, v in self.rct.items()},
               "target": {k: v.to_dict() for k, v in self.target.items()}}
        if self.rct_weighted is not None:
            out["rct_weighted"] = {k: v.to_dict() for k, v in self.rct_weighted.items()}
        return out


def weighted_mean(values, weights) -> float:
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not total > 0:
        raise DegenerateWeightsError("weights sum to zero")
    return float(np.sum(w * np.asarray(values, dtype=float)) / total)


def weighted_sd(values, weights) -> float:
    """Frequency-weight SD with correction sum(w)/(sum(w)-1)."""
    values = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if not total > 1:
        return float("nan")
    m = np.dot(w, values) / total
    return float(np.sqrt(np.dot(w, (values - m) ** 2) / (total - 1.0)))


def _summarise(values: np.ndarray, weights=None) -> ColumnSummary:
    if values.size == 0:
        return ColumnSummary(float("nan"), float("nan"), float("nan"), float("nan"), 0)
    if weights is None:
        sd = float(np.std(values, ddof=1)) if values.size > 1 else float("nan")
        return ColumnSummary(float(values.mean()), sd, float(values.min()),
                             float(values.max()), values.size)
    return ColumnSummary(weighted_mean(values, weights), weighted_sd(values, weights),
                         float(values.min()), float(values.max()), values.size)


def sample_means(data: StackedDataset, roles: RoleMap | None = None, weights=None,
                 columns: Iterable[str] | None = None) -> SummaryTable:
    """Mean, SD, min and max of each covariate per sample.

    ``weights`` (one per RCT row) add a Hájek-weighted RCT summary. V-role
    columns have an empty target summary.
    """
    if columns is None:
        columns = list(roles.roles) if roles is not None else data.columns
    columns = list(columns)
    w = None
    if weights is not None:
        w = np.asarray(getattr(weights, "weights", weights), dtype=float)
        if w.shape != (data.n_rct,):
            raise ValidationError(f"weights must have one entry per RCT row ({data.n_rct})")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError("weights must be finite and non-negative")
        if not w.sum() > 0:
            raise DegenerateWeightsError("all weights are zero")
    rct, target, weighted = {}, {}, {} if w is not None else None
    for name in columns:
        r = data.rct_column(name)
        tv = data.target_column(name)
        tv = tv[~np.isnan(tv)]
        rct[name] = _summarise(r)
        target[name] = _summarise(tv)
        if w is not None:
            weighted[name] = _summarise(r, w)
    return SummaryTable(rct, target, weighted)
