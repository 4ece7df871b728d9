"""Command-line interface.

Every subcommand takes its parameters from an optional ``--config`` file of
``key=value`` lines and from flags (flags win), writes
``effective_config.txt`` to its output directory, and exits with 0 on success,
2 on a configuration error, 3 on invalid input data and 4 on a numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys

import numpy as np

from . import config as cfgmod
from .hp_calibrate import calibrate
from .conformal import ConformalConfig, fdr_screen, tune_gamma
from .core_types import TimeGrid
from .errors import ConfigError, NumericalError, ScreencalError
from .io import fmt, read_curves_csv, read_dataset_csv, write_curves_csv, write_dataset_csv
from .ipcw import event_time_weights, fixed_time_weights
from .models import WeibullModel, WeibullPopulation, fit_censoring, fit_cox, predict_curves
from .seeding import derive_seed
from .simulate import (
    CurvePopulation,
    ReplicateConfig,
    ReplicateMetrics,
    aggregate,
    draw_replicate,
    run_protocol,
)

log = logging.getLogger("screencal")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
METRICS_HEADER = ["method", "t0", "replicate", "yield", "survival", "csurvival", "selected_any"]
SUMMARY_HEADER = [
    "method", "t0", "replicates", "yield", "yield_2se", "survival", "survival_2se",
    "csurvival", "csurvival_2se", "p_selected",
]
NOT_EVALUATED = "—"


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _open(path):
    return open(path, "w", newline="", encoding="utf-8")


# -- fit ---------------------------------------------------------------------

def cmd_fit(cfg):
    train = read_dataset_csv(cfg["train"])
    target = read_dataset_csv(cfg["predict"]) if cfg["predict"] else train
    S, G = fit_cox(train), fit_censoring(train)
    grid = TimeGrid(np.asarray(cfg["grid"])) if cfg["grid"] else None
    write_curves_csv(predict_curves(S, target.covariates, target.ids, grid), os.path.join(cfg["out"], "survival_curves.csv"))
    write_curves_csv(predict_curves(G, target.covariates, target.ids, grid), os.path.join(cfg["out"], "censoring_curves.csv"))
    with _open(os.path.join(cfg["out"], "coefficients.csv")) as fh:
        w = _writer(fh)
        w.writerow(["model", "covariate", "coefficient"])
        for name, m in (("survival", S), ("censoring", G)):
            for j, b in enumerate(m.coefficients):
                w.writerow([name, f"x{j + 1}", fmt(b)])
    print(f"fit: n={len(train)} events={int(train.event.sum())} "
          f"survival_iterations={S.fit_diagnostics.iterations} censoring_iterations={G.fit_diagnostics.iterations}")


# -- calibrate ---------------------------------------------------------------

def cmd_calibrate(cfg):
    data = read_dataset_csv(cfg["data"])
    S = read_curves_csv(cfg["survival"]).aligned_to(data.ids)
    G = read_curves_csv(cfg["censoring"]).aligned_to(data.ids)
    t0 = cfg["t0"]
    scores = S.evaluate(t0)
    if cfg["flavor"] == "ft":
        w = fixed_time_weights(data, G, t0, cfg["winsor_pct"])
    else:
        w = event_time_weights(data, G, cfg["winsor_pct"])
    res = calibrate(cfg["method"], data, scores, w, cfg["alpha"], cfg["delta"], t0, cfg["flavor"],
                    cfg["n_min"], cfg["grid_size"], cfg["B"], derive_seed(cfg["seed"], "calibrate"))
    with _open(os.path.join(cfg["out"], "calibration.csv")) as fh:
        wr = _writer(fh)
        wr.writerow(["lambda", "mu_hat", "r_hat", "ucb", "n_selected", "fallback", "feasible", "path"])
        for row in res.table:
            wr.writerow([fmt(row.lam), fmt(row.mu_hat), fmt(row.r_hat), fmt(row.ucb), row.n_selected,
                         int(row.fallback), int(row.feasible), row.path])
    lam = "abstain" if res.lambda_hat is None else fmt(res.lambda_hat)
    n_sel = 0 if res.lambda_hat is None else int(np.sum(scores > res.lambda_hat))
    line = (f"method={res.method} lambda_hat={lam} alpha={fmt(res.alpha)} delta={fmt(res.delta)} "
            f"t0={fmt(t0)} n_cal_selected={n_sel}")
    if res.band_halfwidth is not None:
        line += f" band_halfwidth={fmt(res.band_halfwidth)}"
    with open(os.path.join(cfg["out"], "summary.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(line + "\n")
    print(line)


# -- screen / tune-gamma -----------------------------------------------------

def cmd_screen(cfg):
    cal = read_dataset_csv(cfg["cal_data"])
    S_cal = read_curves_csv(cfg["cal_survival"]).aligned_to(cal.ids)
    G_cal = read_curves_csv(cfg["cal_censoring"]).aligned_to(cal.ids)
    S_te = read_curves_csv(cfg["test_survival"])
    t0 = cfg["t0"]
    gamma = cfg["gamma"]
    if gamma == "auto":
        if not cfg["tuning_data"]:
            raise ConfigError("tuning_data", "required when gamma=auto")
        tuning = read_dataset_csv(cfg["tuning_data"])
        gamma = tune_gamma(tuning, t0, cfg["alpha"], R_reps=cfg["tune_reps"], criterion=cfg["criterion"],
                           seed=derive_seed(cfg["seed"], "tune"), winsor_pct=cfg["winsor_pct"]).gamma
    conf = ConformalConfig(cfg["alpha"], float(gamma), cfg["nu"], cfg["bootstrap_B"], cfg["winsor_pct"])
    res = fdr_screen(S_cal, G_cal, cal, S_te, t0, conf, seed=derive_seed(cfg["seed"], "abstain"))
    selected = res.selected
    with _open(os.path.join(cfg["out"], "screen.csv")) as fh:
        w = _writer(fh)
        w.writerow(["id", "score", "p_value", "selected"])
        for rid, s, p, sel in zip(res.ids, res.risk_scores, res.p_values, selected):
            w.writerow([rid, fmt(s), fmt(p), int(sel)])
    summary = {
        "alpha": conf.alpha,
        "gamma": conf.gamma,
        "t0": t0,
        "n_selected": res.R,
        "q_hat": res.q_hat,
        "implied_lambda": res.implied_lambda,
        "p_positive": res.p_positive_est,
        "abstained": res.abstained,
        "clipped_pvalues": res.diagnostics["clipped_pvalues"],
    }
    line = json.dumps(summary, sort_keys=True)
    with open(os.path.join(cfg["out"], "summary.jsonl"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(line + "\n")
    print(line)


def cmd_tune_gamma(cfg):
    data = read_dataset_csv(cfg["data"])
    res = tune_gamma(data, cfg["t0"], cfg["alpha"], gammas=cfg["gammas"], R_reps=cfg["tune_reps"],
                     criterion=cfg["criterion"], seed=derive_seed(cfg["seed"], "tune"),
                     winsor_pct=cfg["winsor_pct"])
    with _open(os.path.join(cfg["out"], "gamma.csv")) as fh:
        w = _writer(fh)
        w.writerow(["gamma", "criterion", "mean_score", "chosen"])
        for g, s in zip(res.gammas, res.mean_scores):
            w.writerow([fmt(g), res.criterion, fmt(s), int(g == res.gamma)])
    print(f"gamma={fmt(res.gamma)} criterion={res.criterion}")


# -- simulate / report -------------------------------------------------------

def _population(cfg):
    if cfg["population"] == "weibull":
        ev, ce = cfg["event_weights"], cfg["censor_weights"]
        if len(ev) != len(ce):
            raise ConfigError("censor_weights", "must have as many entries as event_weights")
        return WeibullPopulation(
            WeibullModel(cfg["event_shape"], cfg["event_intercept"], ev),
            WeibullModel(cfg["censor_shape"], cfg["censor_intercept"], ce),
            cfg["covariate_sd"],
        )
    for key in ("design", "true_survival", "true_censoring"):
        if not cfg[key]:
            raise ConfigError(key, "required when population=curves")
    design = read_dataset_csv(cfg["design"])
    return CurvePopulation(
        design.covariates,
        read_curves_csv(cfg["true_survival"]).aligned_to(design.ids),
        read_curves_csv(cfg["true_censoring"]).aligned_to(design.ids),
    )


def replicate_config(cfg):
    try:
        return ReplicateConfig(
            cfg["n_train"], cfg["n_cal"], cfg["n_test"], cfg["t0"], cfg["alpha"], cfg["delta"],
            methods=cfg["methods"], master_seed=cfg["seed"], replicates=cfg["replicates"],
            flavor=cfg["flavor"], K=cfg["grid_size"], n_min=cfg["n_min"], B=cfg["B"], nu=cfg["nu"],
            bootstrap_B=cfg["bootstrap_B"], gamma=cfg["gamma"], tune_reps=cfg["tune_reps"],
            winsor_pct=cfg["winsor_pct"], refit=cfg["refit"], workers=cfg["workers"],
        )
    except ValueError as exc:
        raise ConfigError("simulate", str(exc))


def _num(x, digits):
    if x is None:
        return NOT_EVALUATED
    if isinstance(x, float) and math.isnan(x):
        return "NA"
    return f"{x:.{digits}f}"


def write_metrics(rows, path):
    with _open(path) as fh:
        w = _writer(fh)
        w.writerow(METRICS_HEADER)
        for m in rows:
            cs = "" if m.conditional_survival is None else fmt(m.conditional_survival)
            w.writerow([m.method, fmt(m.t0), m.replicate, m.yield_, fmt(m.survival_rate), cs, int(m.selected_any)])


def read_metrics(path):
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise ScreencalError(f"{path}: expected header {','.join(METRICS_HEADER)}")
        for line in reader:
            if not line:
                continue
            method, t0, rep, y, s, cs, any_ = line
            rows.append(ReplicateMetrics(method, float(t0), int(rep), int(y), float(s),
                                         None if cs == "" else float(cs), any_ == "1"))
    return rows


def emit_report(rows, path):
    """Summary CSV: mean and two standard errors per method and horizon.

    Fixed decimals (yield 1, rates 3); ``—`` marks a conditional survival that
    is not evaluated and ``NA`` an undefined standard error.
    """
    if not rows:
        raise ValueError("empty metrics table")
    summary = aggregate(rows)
    with _open(path) as fh:
        w = _writer(fh)
        w.writerow(SUMMARY_HEADER)
        for s in summary:
            w.writerow([
                s.method, _num(s.t0, 2), s.replicates, _num(s.yield_mean, 1), _num(s.yield_2se, 1),
                _num(s.survival_mean, 3), _num(s.survival_2se, 3), _num(s.csurvival_mean, 3),
                _num(s.csurvival_2se, 3), _num(s.p_selected, 3),
            ])
    return summary


def cmd_simulate(cfg):
    pop = _population(cfg)
    rc = replicate_config(cfg)
    result = run_protocol(rc, pop)
    write_metrics(result.rows, os.path.join(cfg["out"], "metrics.csv"))
    with _open(os.path.join(cfg["out"], "failures.csv")) as fh:
        w = _writer(fh)
        w.writerow(["replicate", "t0", "error"])
        for r, t0, msg in result.failures:
            w.writerow([r, "" if t0 is None else fmt(t0), msg])
    if result.rows:
        emit_report(result.rows, os.path.join(cfg["out"], "summary.csv"))
    if cfg["save_datasets"]:
        ddir = os.path.join(cfg["out"], "datasets")
        os.makedirs(ddir, exist_ok=True)
        for r in range(rc.replicates):
            draw = draw_replicate(pop, rc, derive_seed(rc.master_seed, "replicate", r))
            for name in ("train", "cal", "test"):
                write_dataset_csv(getattr(draw, name), os.path.join(ddir, f"replicate{r}_{name}.csv"))
    print(f"simulate: {len(result.rows)} rows, {len(result.failures)} failures")
    if not result.rows:
        raise NumericalError("every replicate failed")


def cmd_report(cfg):
    rows = read_metrics(cfg["metrics"])
    if not rows:
        raise ConfigError("metrics", "metrics table is empty")
    emit_report(rows, os.path.join(cfg["out"], "summary.csv"))
    print(f"report: {len(rows)} rows")


COMMANDS = {
    "fit": cmd_fit,
    "calibrate": cmd_calibrate,
    "screen": cmd_screen,
    "tune-gamma": cmd_tune_gamma,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="screencal", description="Calibrate low-risk screening rules on censored data.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in cfgmod.SCHEMAS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value configuration file")
        for key, entry in schema.items():
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, default=None, help=entry.help or None)
    return parser


def parse_config(argv):
    """Parse ``argv`` into ``(command, resolved config, verbose)``."""
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    file_values = cfgmod.read_config_file(args.config) if args.config else {}
    return args.command, cfgmod.resolve(args.command, file_values, flags), args.verbose


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        command, cfg, verbose = parse_config(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        os.makedirs(cfg["out"], exist_ok=True)
        cfgmod.write_effective_config(cfg, os.path.join(cfg["out"], "effective_config.txt"))
        COMMANDS[command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ScreencalError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
