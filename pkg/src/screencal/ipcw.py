"""Inverse-probability-of-censoring weights and selected-set risk estimators.

Two flavors are supported. Event-time weighting (``"et"``) upweights events
observed by ``t0`` with ``1 / G(T~- | x)``; fixed-time weighting (``"ft"``)
upweights subjects known event-free at ``t0`` with ``1 / G(t0 | x)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_types import CensoredDataset, SurvivalCurveSet
from .errors import DimensionMismatch, EmptySelection, PositivityViolation

FLAVORS = ("et", "ft")


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Winsorized weights aligned with the calibration records.

    ``raw`` keeps the uncapped weights; ``cap`` is the realized ceiling ``M``.
    """

    weights: np.ndarray
    cap: float
    raw: np.ndarray = None
    flavor: str = "et"

    def __len__(self):
        return self.weights.size


def winsorize(raw, winsor_pct):
    """Cap ``raw`` at its ``winsor_pct`` percentile (linear interpolation)."""
    raw = np.asarray(raw, dtype=float)
    if not 0 < winsor_pct <= 100:
        raise ValueError("winsor_pct must be in (0, 100]")
    cap = float(np.percentile(raw, winsor_pct)) if raw.size else 1.0
    return np.minimum(raw, cap), cap


def _capped(g, data, winsor_pct, flavor):
    g = np.asarray(g, dtype=float)
    if np.any(g <= 0):
        bad = data.ids[np.flatnonzero(g <= 0)[0]]
        raise PositivityViolation(f"censoring survival is zero for id {bad!r}")
    raw = 1.0 / g
    w, cap = winsorize(raw, winsor_pct)
    return WeightVector(w, cap, raw, flavor)


def _check_aligned(data, curves):
    if len(curves) != len(data) or not np.array_equal(curves.ids.astype(str), data.ids.astype(str)):
        curves = curves.aligned_to(data.ids)
    return curves


def event_time_weights(data: CensoredDataset, Ghat: SurvivalCurveSet, winsor_pct=99.0) -> WeightVector:
    """``w_i = 1 / G(T~_i- | X_i)``, left limit taken exactly on the step curve,
    then capped at the ``winsor_pct`` percentile of the raw weights."""
    Ghat = _check_aligned(data, Ghat)
    return _capped(Ghat.left_limit(data.time), data, winsor_pct, "et")


def fixed_time_weights(data: CensoredDataset, Ghat: SurvivalCurveSet, t0, winsor_pct=99.0) -> WeightVector:
    """``w_i = 1 / G(t0 | X_i)`` with the same capping as :func:`event_time_weights`."""
    Ghat = _check_aligned(data, Ghat)
    return _capped(Ghat.evaluate(float(t0)), data, winsor_pct, "ft")


@dataclass(frozen=True, eq=False)
class RiskEstimate:
    lam: float
    theta_hat: float
    mu_hat: float
    r_hat: float
    n_selected: int
    n: int
    flavor: str
    psi_theta: np.ndarray
    psi_mu: np.ndarray

    @property
    def empty(self):
        """True when nobody is selected and ``r_hat`` is undefined (NaN)."""
        return self.n_selected == 0

    @property
    def contributions(self):
        """Uncentered per-subject terms whose mean is ``theta_hat``."""
        return self.psi_theta + self.theta_hat


def contribution_terms(data: CensoredDataset, weights, t0, flavor):
    """Per-subject theta contribution for a selected subject.

    ET: ``w_i I(T~_i <= t0, E_i = 1)``; FT: ``1 - w_i I(T~_i >= t0)``. A tie at
    ``T~ = t0`` counts as an event for ET and as a survivor for FT.
    """
    w = weights.weights if isinstance(weights, WeightVector) else np.asarray(weights, dtype=float)
    if w.size != len(data):
        raise DimensionMismatch("weights are not aligned with the data")
    if flavor == "et":
        return w * ((data.time <= t0) & data.event)
    if flavor == "ft":
        return 1.0 - w * (data.time >= t0)
    raise ValueError(f"unknown IPCW flavor {flavor!r}")


def _estimate(lam, selected, terms, flavor):
    n = terms.size
    a = selected.astype(float)
    z = a * terms
    theta = float(z.mean()) if n else 0.0
    mu = float(a.mean()) if n else 0.0
    k = int(selected.sum())
    # sum / count rather than theta / mu: identical in exact arithmetic, and
    # exactly the empirical fraction when the weights are 1
    r = float(z.sum()) / k if k > 0 else float("nan")
    return RiskEstimate(float(lam), theta, mu, r, k, n, flavor, z - theta, a - mu)


def estimate_risk(data, scores, weights, lam, t0, flavor="et") -> RiskEstimate:
    """IPCW estimate of the selected-set risk at threshold ``lam``.

    Selection is ``scores > lam``. Returns ``theta_hat``, ``mu_hat``,
    ``r_hat = theta_hat / mu_hat`` (NaN with :attr:`RiskEstimate.empty` set when
    nothing is selected) and the centered influence contributions.
    """
    scores = np.asarray(scores, dtype=float)
    terms = contribution_terms(data, weights, t0, flavor)
    return _estimate(lam, scores > lam, terms, flavor)


def estimate_path(data, scores, weights, lambdas, t0, flavor="et"):
    """:func:`estimate_risk` for each threshold in ``lambdas``."""
    scores = np.asarray(scores, dtype=float)
    terms = contribution_terms(data, weights, t0, flavor)
    return [_estimate(lam, scores > lam, terms, flavor) for lam in lambdas]


def influence(est: RiskEstimate):
    """Per-subject linearization of ``r_hat``: ``psi_theta/mu - theta/mu^2 psi_mu``."""
    if est.empty:
        raise EmptySelection(f"no subject selected at lambda={est.lam}")
    mu = est.mu_hat
    return est.psi_theta / mu - est.theta_hat / mu**2 * est.psi_mu


def variance_of_r(est: RiskEstimate) -> float:
    """Delta-method variance ``sigma^2`` of ``r_hat`` (so that SE = sigma / sqrt(n))."""
    phi = influence(est)
    return float(np.mean(phi**2))
