"""Pointwise upper confidence bounds for the selected-set risk ``r(lambda)``."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import bdtr
from scipy.stats import norm

from .ipcw import RiskEstimate, WeightVector, contribution_terms, variance_of_r
from .errors import EmptySelection
from .seeding import derive_rng

METHODS = ("delta", "bootstrap", "finite_sample")


@dataclass(frozen=True)
class UcbResult:
    lam: float
    ucb: float
    method: str
    delta_level: float
    fallback_triggered: bool = False
    r_hat: float = float("nan")
    skipped_resamples: int = 0

    @property
    def ucb_clamped(self):
        return min(max(self.ucb, 0.0), 1.0)


def _check_delta(delta):
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")


def ucb_delta(est: RiskEstimate, delta) -> UcbResult:
    """``r_hat + z_{1-delta} sigma_hat / sqrt(n)``."""
    _check_delta(delta)
    sigma = math.sqrt(variance_of_r(est))
    ucb = est.r_hat + float(norm.ppf(1.0 - delta)) * sigma / math.sqrt(est.n)
    return UcbResult(est.lam, ucb, "delta", delta, False, est.r_hat)


def upper_quantile(values, level):
    """Order-statistic quantile: the ``ceil(level (B + 1))``-th smallest of ``B`` values.

    With ``level = 1 - 1/B`` this is the maximum.
    """
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("no values")
    k = math.ceil(level * (v.size + 1) - 1e-9)
    return float(v[min(max(k, 1), v.size) - 1])


def ucb_bootstrap(data, scores, weights, lam, delta, B=1000, seed=0, t0=None, flavor="et") -> UcbResult:
    """Nonparametric bootstrap bound: resample the ``n`` calibration triples
    ``B`` times with fixed weights, take the upper ``1 - delta`` quantile of the
    replicate risks. Replicates that select nobody are skipped and counted.

    Replicate ``b`` draws from its own stream keyed by ``(seed, b)``, so the
    result does not depend on the order in which replicates are evaluated.
    """
    _check_delta(delta)
    if B < 100:
        raise ValueError("bootstrap needs B >= 100")
    scores = np.asarray(scores, dtype=float)
    terms = contribution_terms(data, weights, t0, flavor)
    sel = scores > lam
    if not sel.any():
        raise EmptySelection(f"no subject selected at lambda={lam}")
    n = scores.size
    r_hat = float(np.sum(terms[sel]) / np.sum(sel))
    reps = []
    skipped = 0
    for b in range(B):
        idx = derive_rng(seed, "ucb-bootstrap", b).integers(0, n, size=n)
        s = sel[idx]
        k = s.sum()
        if k == 0:
            skipped += 1
            continue
        reps.append(terms[idx][s].sum() / k)
    if not reps:
        raise EmptySelection("every bootstrap replicate selected nobody")
    ucb = upper_quantile(reps, 1.0 - delta)
    return UcbResult(float(lam), ucb, "bootstrap", delta, False, r_hat, skipped)


def cp_lower(n: int, k: int, delta) -> float:
    """Exact Clopper-Pearson lower bound: the ``p`` with ``P(Bin(n, p) <= k-1) = 1 - delta``.

    Solved by bisection to machine precision; ``k = 0`` gives 0.
    """
    n, k = int(n), int(k)
    if n < 1 or not 0 <= k <= n:
        raise ValueError(f"need n >= 1 and 0 <= k <= n, got n={n}, k={k}")
    _check_delta(delta)
    if k == 0:
        return 0.0
    target = 1.0 - delta
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if bdtr(k - 1, n, mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def bernstein_upper(theta_hat, v_hat, n, M, delta):
    """Empirical-Bernstein upper bound on a mean of ``[0, M]``-ranged terms."""
    log_term = math.log(4.0 / delta)
    return theta_hat + math.sqrt(2.0 * v_hat * log_term / n) + 7.0 * M * log_term / (3.0 * (n - 1))


def ucb_finite_sample(est: RiskEstimate, weights: WeightVector, delta) -> UcbResult:
    """Finite-sample bound ``theta_upp(delta/2) / mu_low(delta/2)``.

    The numerator is the empirical-Bernstein bound on the per-subject
    contributions (sample variance with ``n - 1``); the range constant is the
    realized weight cap ``M`` (at least 1, the FT contributions span ``[1-M, 1]``).
    The denominator is the Clopper-Pearson lower bound on the selection fraction.
    """
    _check_delta(delta)
    n = est.n
    if n < 2:
        raise ValueError("finite-sample bound needs n >= 2")
    half = delta / 2.0
    mu_low = cp_lower(n, est.n_selected, half)
    if mu_low <= 0.0:
        raise EmptySelection(f"no subject selected at lambda={est.lam}")
    v_hat = float(np.sum(est.psi_theta**2) / (n - 1))
    M = max(float(weights.cap), 1.0)
    ucb = bernstein_upper(est.theta_hat, v_hat, n, M, half) / mu_low
    return UcbResult(est.lam, ucb, "finite_sample", delta, False, est.r_hat)


def ucb_pointwise(est: RiskEstimate, weights: WeightVector, delta, n_min=10) -> UcbResult:
    """Delta-method bound, or the finite-sample bound when fewer than ``n_min``
    calibration subjects are selected (strictly below ``n_min``)."""
    if est.empty:
        raise EmptySelection(f"no subject selected at lambda={est.lam}")
    if est.n_selected < n_min:
        res = ucb_finite_sample(est, weights, delta)
        return UcbResult(res.lam, res.ucb, res.method, delta, True, est.r_hat)
    return ucb_delta(est, delta)
