"""Conformal screening with false discovery rate control.

Each test subject gets an IPCW-weighted conformal p-value for the null
"event before t0"; Benjamini-Hochberg selects the low-risk subset, and an
optional bootstrap estimate of P(R > 0) lets the procedure abstain when
selections are unstable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_types import CensoredDataset, SurvivalCurveSet
from .errors import CurveRangeError, InsufficientData, NumericalError
from .ipcw import WeightVector, event_time_weights
from .models import fit_censoring, fit_cox, predict_curves
from .seeding import derive_rng

CRITERIA = ("fisher", "bh_count")


@dataclass(frozen=True)
class ConformalConfig:
    alpha: float
    gamma: float = 0.0
    nu: float = 0.9
    bootstrap_B: int = 1000
    winsor_pct: float = 99.0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 <= self.nu <= 1:
            raise ValueError("nu must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class SelectionResult:
    ids: np.ndarray
    p_values: np.ndarray
    rejected: np.ndarray
    q_hat: float
    implied_lambda: float | None
    abstained: bool
    p_positive_est: float | None
    risk_scores: np.ndarray
    conformity_scores: np.ndarray
    pre_abstention_rejected: np.ndarray = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def R(self):
        return int(self.rejected.size)

    @property
    def selected(self):
        mask = np.zeros(self.ids.size, dtype=bool)
        mask[self.rejected] = True
        return mask


def conformity_scores(Shat_cal: SurvivalCurveSet, cal: CensoredDataset, Shat_test: SurvivalCurveSet, t0, gamma,
                      extrapolate=True):
    """Calibration scores ``S(T~_i + gamma | X_i)`` and test scores ``S(t0 + gamma | X)``.

    With ``extrapolate=False`` a required time past the last grid knot raises
    :class:`CurveRangeError`; otherwise the last value is held.
    """
    Shat_cal = Shat_cal.aligned_to(cal.ids) if not np.array_equal(Shat_cal.ids, cal.ids) else Shat_cal
    cal_t = cal.time + gamma
    test_t = float(t0) + gamma
    if not extrapolate:
        if not Shat_cal.covers(cal_t):
            raise CurveRangeError("calibration evaluation time beyond the survival grid")
        if len(Shat_test) and not Shat_test.covers(test_t):
            raise CurveRangeError("test evaluation time beyond the survival grid")
    return Shat_cal.evaluate(cal_t), Shat_test.evaluate(test_t)


def conformal_pvalues(cal_scores, cal_data: CensoredDataset, weights, test_scores, t0, return_clipped=False):
    """``p_j = (1 + sum_i E_i I(T~_i <= t0) w_i I(s_i >= s_j)) / (1 + n)``, clipped at 1."""
    test_scores = np.asarray(test_scores, dtype=float)
    n = len(cal_data)
    if n == 0:
        p = np.ones(test_scores.shape)
        return (p, 0) if return_clipped else p
    w = weights.weights if isinstance(weights, WeightVector) else np.asarray(weights, dtype=float)
    active = cal_data.event & (cal_data.time <= t0)
    s = np.asarray(cal_scores, dtype=float)[active]
    wa = w[active]
    order = np.argsort(s, kind="stable")
    s, wa = s[order], wa[order]
    tail = np.concatenate([np.cumsum(wa[::-1])[::-1], [0.0]])
    mass = tail[np.searchsorted(s, test_scores, side="left")]
    p = (1.0 + mass) / (1.0 + n)
    clipped = int(np.sum(p > 1.0))
    p = np.minimum(p, 1.0)
    return (p, clipped) if return_clipped else p


def bh_select(p_values, alpha):
    """Benjamini-Hochberg step-up.

    Returns ``(rejected indices in ascending order, q_hat = alpha k*/m)`` where
    ``k* = max{k : p_(k) <= alpha k / m}``; ``q_hat = 0`` when nothing is rejected.
    """
    p = np.asarray(p_values, dtype=float)
    m = p.size
    if m == 0:
        return np.zeros(0, dtype=int), 0.0
    order = np.argsort(p, kind="stable")
    ks = np.arange(1, m + 1)
    ok = np.flatnonzero(p[order] <= alpha * ks / m)
    if ok.size == 0:
        return np.zeros(0, dtype=int), 0.0
    k_star = int(ok[-1]) + 1
    return np.sort(order[:k_star]), alpha * k_star / m


def implied_threshold(risk_scores, rejected):
    """Smallest risk score among the rejected subjects, or ``None``."""
    rejected = np.asarray(rejected, dtype=int)
    if rejected.size == 0:
        return None
    return float(np.min(np.asarray(risk_scores, dtype=float)[rejected]))


def _any_rejection(p, alpha):
    m = p.size
    return bool(np.any(np.sort(p) <= alpha * np.arange(1, m + 1) / m))


def abstention_probability(cal_scores, cal_data, weights, test_scores, t0, alpha, B=1000, seed=0):
    """Bootstrap estimate of ``P(R > 0)``: resample the ``m`` test subjects,
    recompute their p-values and rerun BH; return the fraction with a rejection."""
    if B < 100:
        raise ValueError("bootstrap needs B >= 100")
    test_scores = np.asarray(test_scores, dtype=float)
    m = test_scores.size
    if m == 0:
        return 0.0
    # a p-value depends on its own test score only, so resampled p-values are
    # the resampled entries of the full-cohort vector
    p_full = conformal_pvalues(cal_scores, cal_data, weights, test_scores, t0)
    hits = 0
    for b in range(B):
        idx = derive_rng(seed, "abstention", b).integers(0, m, size=m)
        hits += _any_rejection(p_full[idx], alpha)
    return hits / B


def fdr_screen(Shat_cal, Ghat_cal, cal, Shat_test, t0, config: ConformalConfig, seed=0, risk_scores=None,
               weights=None):
    """Full conformal screening pipeline.

    ``risk_scores`` default to ``S(t0 | x)`` of the test subjects and are only
    used to report the implied cohort threshold. Abstention (empty selection)
    happens when the bootstrap estimate of ``P(R > 0)`` is below ``config.nu``;
    ``nu = 0`` skips the bootstrap.
    """
    if weights is None:
        weights = event_time_weights(cal, Ghat_cal, config.winsor_pct)
    cal_s, test_s = conformity_scores(Shat_cal, cal, Shat_test, t0, config.gamma)
    p, clipped = conformal_pvalues(cal_s, cal, weights, test_s, t0, return_clipped=True)
    rejected, q_hat = bh_select(p, config.alpha)
    if risk_scores is None:
        risk_scores = Shat_test.evaluate(float(t0))
    p_pos = None
    abstained = False
    if config.nu > 0:
        p_pos = abstention_probability(cal_s, cal, weights, test_s, t0, config.alpha, config.bootstrap_B, seed)
        abstained = p_pos < config.nu
    final = np.zeros(0, dtype=int) if abstained else rejected
    return SelectionResult(
        ids=Shat_test.ids,
        p_values=p,
        rejected=final,
        q_hat=q_hat,
        implied_lambda=implied_threshold(risk_scores, final),
        abstained=abstained,
        p_positive_est=p_pos,
        risk_scores=np.asarray(risk_scores, dtype=float),
        conformity_scores=test_s,
        pre_abstention_rejected=rejected,
        diagnostics={"clipped_pvalues": clipped, "weight_cap": weights.cap, "gamma": config.gamma},
    )


def default_gamma_grid(data: CensoredDataset):
    """``{0}`` together with the deciles of the observed event times."""
    ev = data.time[data.event]
    if ev.size == 0:
        return np.array([0.0])
    return np.unique(np.concatenate([[0.0], np.quantile(ev, np.linspace(0.1, 0.9, 9))]))


@dataclass(frozen=True)
class GammaTuning:
    gamma: float
    gammas: tuple
    mean_scores: tuple
    criterion: str


def _criterion(p, alpha, criterion):
    if criterion == "fisher":
        return float(-2.0 * np.sum(np.log(p)))
    if criterion == "bh_count":
        return float(bh_select(p, alpha)[0].size)
    raise ValueError(f"unknown criterion {criterion!r}")


def select_gamma(gammas, mean_scores):
    """Argmax of the averaged criterion; ties go to the smallest gamma."""
    g = np.asarray(gammas, dtype=float)
    s = np.asarray(mean_scores, dtype=float)
    best = np.flatnonzero(s == s.max())
    return float(g[best].min())


def tune_gamma(tuning_data: CensoredDataset, t0, alpha, gammas=None, R_reps=20, fractions=(0.5, 0.25, 0.25),
               criterion="fisher", seed=0, winsor_pct=99.0, models=None) -> GammaTuning:
    """Cross-validated choice of the score offset ``gamma``.

    Each of ``R_reps`` random splits of ``tuning_data`` (train/cal/test by
    ``fractions``) refits Cox survival and censoring models on its training
    part, unless ``models=(S, G)`` supplies fixed ones, then scores every
    candidate by the Fisher statistic ``-2 sum log p`` or the BH rejection
    count on its test part. The tuning data must be disjoint from the final
    calibration data; this is not checked.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    gammas = default_gamma_grid(tuning_data) if gammas is None else np.asarray(sorted(set(gammas)), dtype=float)
    if gammas.size == 1:
        return GammaTuning(float(gammas[0]), tuple(gammas.tolist()), (0.0,), criterion)
    N = len(tuning_data)
    f_train, f_cal, _ = fractions
    n_train = int(round(f_train * N))
    n_cal = int(round(f_cal * N))
    totals = np.zeros(gammas.size)
    for r in range(R_reps):
        perm = derive_rng(seed, "tune-split", r).permutation(N)
        tr = tuning_data.subset(perm[:n_train])
        ca = tuning_data.subset(perm[n_train:n_train + n_cal])
        te = tuning_data.subset(perm[n_train + n_cal:])
        if models is None:
            if not tr.event.any() or tr.event.all():
                raise InsufficientData(f"tuning split {r} has no events or no censoring to fit on")
            try:
                S_model, G_model = fit_cox(tr), fit_censoring(tr)
            except NumericalError as exc:
                raise InsufficientData(f"tuning split {r}: {exc}")
        else:
            S_model, G_model = models
        if not (ca.event & (ca.time <= t0)).any():
            raise InsufficientData(f"tuning split {r} has no calibration events before t0")
        S_cal = predict_curves(S_model, ca.covariates, ca.ids)
        S_te = predict_curves(S_model, te.covariates, te.ids)
        G_cal = predict_curves(G_model, ca.covariates, ca.ids)
        w = event_time_weights(ca, G_cal, winsor_pct)
        for k, g in enumerate(gammas):
            cs, ts = conformity_scores(S_cal, ca, S_te, t0, g)
            p = conformal_pvalues(cs, ca, w, ts, t0)
            totals[k] += _criterion(p, alpha, criterion)
    means = totals / R_reps
    return GammaTuning(select_gamma(gammas, means), tuple(gammas.tolist()), tuple(means.tolist()), criterion)
