"""Run configuration: flat ``key=value`` files merged with command-line flags.

Each subcommand declares its keys in :data:`SCHEMAS`. Values from a config
file are overridden by flags; unknown keys, missing required keys and
out-of-range values raise :class:`~screencal.errors.ConfigError`.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

from .errors import ConfigError

REQUIRED = object()


def _float_in(lo, hi, lo_open=True, hi_open=True):
    def check(v):
        if (v <= lo if lo_open else v < lo) or (v >= hi if hi_open else v > hi):
            lb = "(" if lo_open else "["
            rb = ")" if hi_open else "]"
            return f"must lie in {lb}{lo}, {hi}{rb}"
        return None
    return check


def _at_least(m):
    return lambda v: None if v >= m else f"must be >= {m}"


def _choice(*options):
    return lambda v: None if v in options else f"must be one of {', '.join(options)}"


def _positive_list(v):
    return None if v and all(x > 0 for x in v) else "must be a nonempty list of positive numbers"


def _gamma(v):
    return None if v == "auto" or float(v) >= 0 else "must be 'auto' or a number >= 0"


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _float_list(text):
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _str_list(text):
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def _gamma_value(text):
    t = str(text).strip()
    return "auto" if t == "auto" else float(t)


@dataclass(frozen=True)
class Key:
    type: object
    default: object = None
    check: object = None
    path: bool = False
    help: str = ""


_ALPHA = Key(float, REQUIRED, _float_in(0, 1), help="target risk level")
_DELTA = Key(float, 0.1, _float_in(0, 1), help="confidence level of the bound")
_T0 = Key(float, REQUIRED, _float_in(0, float("inf")), help="time horizon")
_SEED = Key(int, 0, help="master seed")
_OUT = Key(str, REQUIRED, help="output directory")
_WINSOR = Key(float, 99.0, _float_in(0, 100, hi_open=False), help="weight winsorization percentile")
_NMIN = Key(int, 10, _at_least(1), help="finite-sample fallback below this many selected")
_B = Key(int, 1000, _at_least(100), help="multiplier bootstrap draws")
_NU = Key(float, 0.9, _float_in(0, 1, False, False), help="abstention cutoff on P(R>0)")
_BOOT = Key(int, 1000, _at_least(100), help="abstention bootstrap draws")
_CRIT = Key(str, "fisher", _choice("fisher", "bh_count"), help="gamma tuning criterion")
_REPS = Key(int, 20, _at_least(1), help="gamma tuning splits")
_FLAVOR = Key(str, "et", _choice("et", "ft"), help="IPCW flavor")

SCHEMAS = {
    "fit": {
        "train": Key(str, REQUIRED, path=True, help="training dataset CSV"),
        "predict": Key(str, None, path=True, help="dataset to predict curves for (default: train)"),
        "grid": Key(_float_list, None, _positive_list, help="comma-separated evaluation times"),
        "out": _OUT,
    },
    "calibrate": {
        "data": Key(str, REQUIRED, path=True, help="calibration dataset CSV"),
        "survival": Key(str, REQUIRED, path=True, help="survival curves for the calibration subjects"),
        "censoring": Key(str, REQUIRED, path=True, help="censoring curves for the calibration subjects"),
        "method": Key(str, "multiplier", _choice("greedy", "bonferroni", "multiplier", "ltt")),
        "alpha": _ALPHA,
        "delta": _DELTA,
        "t0": _T0,
        "flavor": _FLAVOR,
        "grid_size": Key(int, 200, _at_least(2), help="number of quantile thresholds"),
        "n_min": _NMIN,
        "B": _B,
        "winsor_pct": _WINSOR,
        "seed": _SEED,
        "out": _OUT,
    },
    "screen": {
        "cal_data": Key(str, REQUIRED, path=True, help="calibration dataset CSV"),
        "cal_survival": Key(str, REQUIRED, path=True, help="survival curves for calibration subjects"),
        "cal_censoring": Key(str, REQUIRED, path=True, help="censoring curves for calibration subjects"),
        "test_survival": Key(str, REQUIRED, path=True, help="survival curves for test subjects"),
        "tuning_data": Key(str, None, path=True, help="dataset for gamma=auto (disjoint from calibration)"),
        "alpha": _ALPHA,
        "t0": _T0,
        "gamma": Key(_gamma_value, 0.0, _gamma, help="score offset or 'auto'"),
        "nu": _NU,
        "bootstrap_B": _BOOT,
        "winsor_pct": _WINSOR,
        "tune_reps": _REPS,
        "criterion": _CRIT,
        "seed": _SEED,
        "out": _OUT,
    },
    "tune-gamma": {
        "data": Key(str, REQUIRED, path=True, help="tuning dataset CSV"),
        "alpha": _ALPHA,
        "t0": _T0,
        "gammas": Key(_float_list, None, help="candidate offsets (default: 0 and event-time deciles)"),
        "tune_reps": _REPS,
        "criterion": _CRIT,
        "winsor_pct": _WINSOR,
        "seed": _SEED,
        "out": _OUT,
    },
    "simulate": {
        "population": Key(str, "weibull", _choice("weibull", "curves")),
        "event_shape": Key(float, 1.5, _at_least(1e-12)),
        "event_intercept": Key(float, 1.4),
        "event_weights": Key(_float_list, (0.6, -0.4)),
        "censor_shape": Key(float, 1.0, _at_least(1e-12)),
        "censor_intercept": Key(float, 1.5),
        "censor_weights": Key(_float_list, (0.2, 0.2)),
        "covariate_sd": Key(float, 1.0, _at_least(1e-12)),
        "design": Key(str, None, path=True, help="covariate design CSV (population=curves)"),
        "true_survival": Key(str, None, path=True, help="true event curves (population=curves)"),
        "true_censoring": Key(str, None, path=True, help="true censoring curves (population=curves)"),
        "n_train": Key(int, 5000, _at_least(1)),
        "n_cal": Key(int, 1000, _at_least(1)),
        "n_test": Key(int, 1000, _at_least(1)),
        "t0": Key(_float_list, REQUIRED, _positive_list, help="comma-separated horizons"),
        "alpha": _ALPHA,
        "delta": _DELTA,
        "methods": Key(_str_list, ("greedy", "bonferroni", "multiplier", "ltt", "conformal", "model_based", "oracle")),
        "replicates": Key(int, 100, _at_least(1)),
        "flavor": _FLAVOR,
        "grid_size": Key(int, 200, _at_least(2)),
        "n_min": _NMIN,
        "B": _B,
        "nu": _NU,
        "bootstrap_B": _BOOT,
        "gamma": Key(_gamma_value, 0.0, _gamma),
        "tune_reps": _REPS,
        "winsor_pct": _WINSOR,
        "refit": Key(_bool, True),
        "workers": Key(int, 1, _at_least(1)),
        "save_datasets": Key(_bool, False),
        "seed": _SEED,
        "out": _OUT,
    },
    "report": {
        "metrics": Key(str, REQUIRED, path=True, help="per-replicate metrics CSV"),
        "out": _OUT,
    },
}

def read_config_file(path):
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}")
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _convert(key, entry, raw):
    """Parse a string value (from a file or flag); typed values pass through."""
    value = raw
    if isinstance(raw, str):
        try:
            value = entry.type(raw.strip())
        except (TypeError, ValueError):
            raise ConfigError(key, f"cannot parse {raw!r}")
    if entry.check is not None:
        reason = entry.check(value)
        if reason:
            raise ConfigError(key, reason)
    return value


def resolve(command, file_values=None, flag_values=None):
    """Merge file values and flags (flags win) into a typed, validated dict."""
    if command not in SCHEMAS:
        raise ConfigError("command", f"unknown command {command!r}")
    schema = SCHEMAS[command]
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    unknown = sorted(set(merged) - set(schema))
    if unknown:
        raise ConfigError(unknown[0], f"unknown key for {command}")
    cfg = {}
    for key, entry in schema.items():
        if key in merged:
            cfg[key] = _convert(key, entry, merged[key])
        elif entry.default is REQUIRED:
            raise ConfigError(key)
        else:
            cfg[key] = entry.default
        if entry.path and cfg[key] is not None and not os.path.exists(cfg[key]):
            raise ConfigError(key, f"file not found: {cfg[key]}")
    return cfg


def format_value(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def write_effective_config(cfg, path):
    """Write every resolved key (sorted) so the run can be replayed with ``--config``."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(cfg):
            if cfg[key] is None:
                continue
            fh.write(f"{key}={format_value(cfg[key])}\n")
