"""Semi-synthetic data generation, the repeated-split protocol and its metrics.

Ground truth comes either from a parametric :class:`~screencal.models.WeibullPopulation`
(i.i.d. covariates, fresh draws per replicate) or from a fixed covariate design
with known event and censoring curves, from which event and censoring times are
redrawn by inverse-CDF sampling each replicate.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .hp_calibrate import METHODS as HP_METHODS, calibrate
from .conformal import ConformalConfig, fdr_screen, tune_gamma
from .core_types import CensoredDataset, SurvivalCurve, SurvivalCurveSet
from .errors import AlignmentError, ScreencalError
from .ipcw import event_time_weights, fixed_time_weights
from .models import WeibullPopulation, fit_censoring, fit_cox, predict_curves
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)

ALL_METHODS = HP_METHODS + ("conformal", "model_based", "oracle")
SENTINEL_FACTOR = 1.5


@dataclass(frozen=True)
class ReplicateConfig:
    n_train: int
    n_cal: int
    n_test: int
    t0_list: tuple
    alpha: float
    delta: float
    methods: tuple = ALL_METHODS
    master_seed: int = 0
    replicates: int = 100
    flavor: str = "et"
    K: int = 200
    n_min: int = 10
    B: int = 1000
    nu: float = 0.9
    bootstrap_B: int = 1000
    gamma: float | str = 0.0
    tune_reps: int = 20
    winsor_pct: float = 99.0
    refit: bool = True
    workers: int = 1

    def __post_init__(self):
        for name in ("n_train", "n_cal", "n_test", "replicates", "workers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        t0s = tuple(float(t) for t in np.atleast_1d(self.t0_list))
        if not t0s or min(t0s) <= 0:
            raise ValueError("horizons must be positive")
        object.__setattr__(self, "t0_list", t0s)
        methods = tuple(self.methods)
        unknown = set(methods) - set(ALL_METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        object.__setattr__(self, "methods", methods)
        if not 0 < self.alpha < 1 or not 0 < self.delta < 1:
            raise ValueError("alpha and delta must lie in (0, 1)")
        if isinstance(self.gamma, str) and self.gamma != "auto":
            raise ValueError("gamma must be a number or 'auto'")


@dataclass(frozen=True)
class ReplicateMetrics:
    method: str
    t0: float
    replicate: int
    yield_: int
    survival_rate: float
    conditional_survival: float | None
    selected_any: bool
    threshold: float | None = None

    @property
    def fdp(self):
        """Fraction of the selected set with an event by ``t0`` (0 when empty)."""
        return 1.0 - self.survival_rate


def sample_time_from_curve(curve: SurvivalCurve, u):
    """``inf{t : S(t) <= u}`` over the curve's knots; ``1.5 x`` the last knot
    when the curve never falls to ``u``."""
    if not 0.0 < u < 1.0:
        raise ValueError("u must lie in (0, 1)")
    times = curve.grid.times
    k = int(np.searchsorted(-curve.values, -u, side="left"))
    return float(times[k]) if k < times.size else SENTINEL_FACTOR * float(times[-1])


def _sample_rows(curves: SurvivalCurveSet, u):
    hit = curves.values <= u[:, None]
    first = hit.argmax(axis=1)
    times = curves.grid.times
    return np.where(hit.any(axis=1), times[first], SENTINEL_FACTOR * times[-1])


def generate_semisynthetic(S_curves: SurvivalCurveSet, G_curves: SurvivalCurveSet, seed, covariates=None):
    """Draw ``T_i`` from ``S_curves`` and ``C_i`` from ``G_curves`` with independent
    uniforms, and return the observed data with the full truth ``(T, C)``.

    ``E = I(T < C)``; the two uniform streams are keyed by ``(seed, "event")``
    and ``(seed, "censor")``.
    """
    if len(S_curves) != len(G_curves) or not np.array_equal(S_curves.ids, G_curves.ids):
        raise AlignmentError("event and censoring curves are not aligned on the same ids")
    n = len(S_curves)
    u = derive_rng(seed, "event").uniform(size=n)
    v = derive_rng(seed, "censor").uniform(size=n)
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    v = np.where(v == 0.0, np.nextafter(0.0, 1.0), v)
    T = _sample_rows(S_curves, u)
    C = _sample_rows(G_curves, v)
    X = np.zeros((n, 0)) if covariates is None else np.asarray(covariates, dtype=float)
    data = CensoredDataset(S_curves.ids, X, np.minimum(T, C), T < C)
    return data, {"T": T, "C": C}


def evaluate_selection(selected, T, t0, method="", replicate=0, threshold=None) -> ReplicateMetrics:
    """Yield and selected-set survival for a boolean mask or index array over ``T``.

    An empty selection counts as survival 1 and has no conditional survival.
    """
    T = np.asarray(T, dtype=float)
    sel = np.asarray(selected)
    if sel.dtype != bool:
        mask = np.zeros(T.size, dtype=bool)
        mask[sel.astype(int)] = True
        sel = mask
    k = int(sel.sum())
    if k == 0:
        return ReplicateMetrics(method, float(t0), replicate, 0, 1.0, None, False, threshold)
    surv = float(np.mean(T[sel] > t0))
    return ReplicateMetrics(method, float(t0), replicate, k, surv, surv, True, threshold)


def prefix_mean_selection(scores, target):
    """Longest prefix of the scores sorted descending whose mean is at least
    ``target``; returns a boolean mask."""
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    means = np.cumsum(scores[order]) / np.arange(1, scores.size + 1)
    ok = np.flatnonzero(means >= target)
    mask = np.zeros(scores.size, dtype=bool)
    if ok.size:
        mask[order[: ok[-1] + 1]] = True
    return mask


def model_based_benchmark(test_scores, target):
    """Largest set of subjects whose average predicted survival is at least ``target``."""
    return prefix_mean_selection(test_scores, target)


def oracle_benchmark(true_survival, target):
    """:func:`model_based_benchmark` applied to the true ``S*(t0 | x)``."""
    return prefix_mean_selection(true_survival, target)


class RiskOracle:
    """Monte-Carlo population risk ``r(lam) = P(T <= t0 | score(X) > lam)``.

    ``scores`` and ``risks`` are evaluated on a large covariate sample; the
    conditional risk ``P(T <= t0 | X)`` is averaged exactly, so the only error
    is from sampling ``X``.
    """

    def __init__(self, scores, risks):
        order = np.argsort(scores, kind="stable")
        self.scores = np.asarray(scores, dtype=float)[order]
        tail = np.cumsum(np.asarray(risks, dtype=float)[order][::-1])[::-1]
        self._tail = np.concatenate([tail, [0.0]])

    @classmethod
    def from_population(cls, population: WeibullPopulation, score_fn, t0, n_mc=10**6, seed=0):
        X = population.sample_covariates(n_mc, derive_rng(seed, "risk-oracle"))
        return cls(score_fn(X), population.risk(X, t0))

    def mass(self, lam):
        """``P(score > lam)``."""
        k = np.searchsorted(self.scores, lam, side="right")
        return (self.scores.size - k) / self.scores.size

    def __call__(self, lam):
        """``r(lam)``; NaN when no sampled score exceeds ``lam``."""
        lam = np.asarray(lam, dtype=float)
        k = np.searchsorted(self.scores, lam, side="right")
        cnt = self.scores.size - k
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(cnt > 0, self._tail[k] / np.maximum(cnt, 1), np.nan)
        return float(r) if r.ndim == 0 else r


@dataclass(frozen=True, eq=False)
class CurvePopulation:
    """Fixed covariate design with known event and censoring curves."""

    covariates: np.ndarray
    S_true: SurvivalCurveSet
    G_true: SurvivalCurveSet

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        if X.shape[0] != len(self.S_true):
            raise AlignmentError("design and curves disagree on the number of subjects")
        object.__setattr__(self, "covariates", X)


@dataclass
class ProtocolResult:
    rows: list
    failures: list = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class _Draw:
    train: CensoredDataset
    cal: CensoredDataset
    test: CensoredDataset
    T_test: np.ndarray
    truth_at: object  # t0 -> S*(t0 | x_test)


def _ids(prefix, n):
    return np.array([f"{prefix}{i}" for i in range(n)], dtype=object)


def _weibull_sample(pop: WeibullPopulation, n, seed, prefix):
    X = pop.sample_covariates(n, derive_rng(seed, "covariates"))
    u = 1.0 - derive_rng(seed, "event").uniform(size=n)
    v = 1.0 - derive_rng(seed, "censor").uniform(size=n)
    T = pop.event.sample(X, u)
    C = pop.censoring.sample(X, v)
    return CensoredDataset(_ids(prefix, n), X, np.minimum(T, C), T < C), T


def draw_replicate(population, config: ReplicateConfig, seed) -> _Draw:
    """One train/cal/test draw with the test truth retained."""
    n_tr, n_ca, n_te = config.n_train, config.n_cal, config.n_test
    if isinstance(population, WeibullPopulation):
        data, T = _weibull_sample(population, n_tr + n_ca + n_te, seed, "s")
        test_idx = np.arange(n_tr + n_ca, n_tr + n_ca + n_te)
        X_te = data.covariates[test_idx]
        return _Draw(
            data.subset(np.arange(n_tr)),
            data.subset(np.arange(n_tr, n_tr + n_ca)),
            data.subset(test_idx),
            T[test_idx],
            lambda t0: population.event.survival(X_te, t0),
        )
    if isinstance(population, CurvePopulation):
        N = len(population.S_true)
        if n_tr + n_ca + n_te > N:
            raise ValueError(f"design has {N} subjects, split needs {n_tr + n_ca + n_te}")
        data, truth = generate_semisynthetic(population.S_true, population.G_true, seed, population.covariates)
        perm = derive_rng(seed, "split").permutation(N)
        tr, ca, te = perm[:n_tr], perm[n_tr:n_tr + n_ca], perm[n_tr + n_ca:n_tr + n_ca + n_te]
        S_te = population.S_true.subset(te)
        return _Draw(data.subset(tr), data.subset(ca), data.subset(te), truth["T"][te], S_te.evaluate)
    raise TypeError(f"unsupported population {type(population).__name__}")


@dataclass(frozen=True, eq=False)
class FixedModels:
    """Models shared by every replicate (fit once on an independent sample)."""

    S: object
    G: object
    S_benchmark: object
    gammas: dict = field(default_factory=dict)


def fit_fixed_models(population, config: ReplicateConfig) -> FixedModels:
    """Fit survival and censoring models once on a dedicated training draw and,
    with ``gamma="auto"``, tune the conformal offset for every horizon."""
    seed = derive_seed(config.master_seed, "fixed-train")
    if isinstance(population, WeibullPopulation):
        train, _ = _weibull_sample(population, config.n_train, seed, "f")
    else:
        train = draw_replicate(population, config, seed).train
    S, G = fit_cox(train), fit_censoring(train)
    gammas = {}
    if config.gamma == "auto" and "conformal" in config.methods:
        for j, t0 in enumerate(config.t0_list):
            gammas[t0] = tune_gamma(train, t0, config.alpha, R_reps=config.tune_reps,
                                    seed=derive_seed(config.master_seed, "tune", j),
                                    winsor_pct=config.winsor_pct, models=(S, G)).gamma
    return FixedModels(S, G, S, gammas)


def _selection_threshold(scores, mask):
    return float(np.min(scores[mask])) if mask.any() else None


def run_replicate(population, config: ReplicateConfig, r, fixed: FixedModels | None = None):
    """All configured methods and horizons for replicate ``r``.

    Returns ``(rows, failures)``; an exception in any stage is recorded for the
    affected horizon (or the whole replicate) instead of propagating.
    """
    seed = derive_seed(config.master_seed, "replicate", r)
    rows, failures = [], []
    try:
        draw = draw_replicate(population, config, seed)
        if fixed is None:
            S, G = fit_cox(draw.train), fit_censoring(draw.train)
            S_bm = None
        else:
            S, G, S_bm = fixed.S, fixed.G, fixed.S_benchmark
        G_cal = predict_curves(G, draw.cal.covariates, draw.cal.ids)
        need_curves = "conformal" in config.methods
        S_cal = predict_curves(S, draw.cal.covariates, draw.cal.ids) if need_curves else None
        S_te = predict_curves(S, draw.test.covariates, draw.test.ids) if need_curves else None
    except (ScreencalError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("replicate %d failed: %s", r, exc)
        return rows, [(r, None, f"{type(exc).__name__}: {exc}")]

    target = 1.0 - config.alpha
    for j, t0 in enumerate(config.t0_list):
        try:
            cal_scores = S.survival(draw.cal.covariates, t0)
            test_scores = S.survival(draw.test.covariates, t0)
            if config.flavor == "ft":
                w = fixed_time_weights(draw.cal, G_cal, t0, config.winsor_pct)
            else:
                w = event_time_weights(draw.cal, G_cal, config.winsor_pct)
            out = []
            for method in config.methods:
                if method in HP_METHODS:
                    res = calibrate(
                        method, draw.cal, cal_scores, w, config.alpha, config.delta, t0, config.flavor,
                        config.n_min, config.K, config.B, derive_seed(seed, "multiplier", j),
                    )
                    mask = res.rule.apply(test_scores)
                    out.append(evaluate_selection(mask, draw.T_test, t0, method, r, res.lambda_hat))
                elif method == "conformal":
                    gamma = config.gamma
                    if gamma == "auto":
                        if fixed is not None:
                            gamma = fixed.gammas[t0]
                        else:
                            gamma = tune_gamma(draw.train, t0, config.alpha, R_reps=config.tune_reps,
                                               seed=derive_seed(seed, "tune", j),
                                               winsor_pct=config.winsor_pct).gamma
                    cfg = ConformalConfig(config.alpha, float(gamma), config.nu, config.bootstrap_B,
                                          config.winsor_pct)
                    w_et = w if config.flavor == "et" else event_time_weights(draw.cal, G_cal, config.winsor_pct)
                    sel = fdr_screen(S_cal, G_cal, draw.cal, S_te, t0, cfg, seed=derive_seed(seed, "abstain", j),
                                     risk_scores=test_scores, weights=w_et)
                    out.append(evaluate_selection(sel.selected, draw.T_test, t0, method, r, sel.implied_lambda))
                elif method == "model_based":
                    if S_bm is None:
                        pooled = CensoredDataset(
                            np.concatenate([draw.train.ids, draw.cal.ids]),
                            np.vstack([draw.train.covariates, draw.cal.covariates]),
                            np.concatenate([draw.train.time, draw.cal.time]),
                            np.concatenate([draw.train.event, draw.cal.event]),
                        )
                        S_bm = fit_cox(pooled)
                    s = S_bm.survival(draw.test.covariates, t0)
                    mask = model_based_benchmark(s, target)
                    out.append(evaluate_selection(mask, draw.T_test, t0, method, r, _selection_threshold(s, mask)))
                elif method == "oracle":
                    s = draw.truth_at(t0)
                    mask = oracle_benchmark(s, target)
                    out.append(evaluate_selection(mask, draw.T_test, t0, method, r, _selection_threshold(s, mask)))
            rows.extend(out)
        except (ScreencalError, ValueError, np.linalg.LinAlgError) as exc:
            log.warning("replicate %d, t0=%g failed: %s", r, t0, exc)
            failures.append((r, t0, f"{type(exc).__name__}: {exc}"))
    return rows, failures


def _run_one(args):
    return run_replicate(*args)


def run_protocol(config: ReplicateConfig, population, fixed: FixedModels | None = None) -> ProtocolResult:
    """Run ``config.replicates`` independent replicates.

    With ``config.refit`` the models are refit on each replicate's training
    split; otherwise they are fit once (see :func:`fit_fixed_models`) unless
    ``fixed`` is given. Rows are ordered by replicate, horizon and method
    regardless of ``config.workers``.
    """
    if not config.refit and fixed is None:
        fixed = fit_fixed_models(population, config)
    jobs = [(population, config, r, None if config.refit else fixed) for r in range(config.replicates)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    rows, failures = [], []
    for rr, ff in results:
        rows.extend(rr)
        failures.extend(ff)
    method_order = {m: i for i, m in enumerate(config.methods)}
    rows.sort(key=lambda m: (m.replicate, m.t0, method_order.get(m.method, len(method_order))))
    return ProtocolResult(rows, failures)


@dataclass(frozen=True)
class SummaryRow:
    method: str
    t0: float
    replicates: int
    yield_mean: float
    yield_2se: float
    survival_mean: float
    survival_2se: float
    csurvival_mean: float | None
    csurvival_2se: float | None
    p_selected: float


def _mean_2se(x):
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()), math.nan
    return float(x.mean()), float(2.0 * x.std(ddof=1) / math.sqrt(x.size))


def aggregate(rows, min_selected_fraction=0.1):
    """Mean and two standard errors per ``(method, t0)``, in first-seen order.

    Conditional survival is averaged over replicates that selected someone and
    reported as ``None`` when that happens in fewer than
    ``min_selected_fraction`` of the replicates.
    """
    groups = {}
    for m in rows:
        groups.setdefault((m.method, m.t0), []).append(m)
    out = []
    for (method, t0), ms in groups.items():
        ms = sorted(ms, key=lambda m: m.replicate)
        y = _mean_2se([m.yield_ for m in ms])
        s = _mean_2se([m.survival_rate for m in ms])
        p_sel = float(np.mean([m.selected_any for m in ms]))
        cs = [m.conditional_survival for m in ms if m.conditional_survival is not None]
        c = _mean_2se(cs) if cs and p_sel >= min_selected_fraction else (None, None)
        out.append(SummaryRow(method, t0, len(ms), y[0], y[1], s[0], s[1], c[0], c[1], p_sel))
    return out
