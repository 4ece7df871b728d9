"""High-probability threshold calibration: greedy pointwise, uniform
(Bonferroni or Gaussian multiplier band) and Learn-Then-Test."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import bounds
from .core_types import ScreeningRule
from .ipcw import estimate_path, estimate_risk, influence
from .seeding import derive_rng

METHODS = ("greedy", "bonferroni", "multiplier", "ltt")


@dataclass(frozen=True, eq=False)
class ThresholdGrid:
    lambdas: np.ndarray
    provenance: str = "explicit"

    def __post_init__(self):
        lam = np.unique(np.asarray(self.lambdas, dtype=float))
        if lam.size == 0 or lam[0] < 0 or lam[-1] > 1:
            raise ValueError("threshold grid must be nonempty and within [0, 1]")
        object.__setattr__(self, "lambdas", lam)

    def __len__(self):
        return self.lambdas.size

    def __iter__(self):
        return iter(self.lambdas.tolist())


def build_grid(scores, K=200) -> ThresholdGrid:
    """``K`` equally spaced quantile levels (0 to 1) of the calibration scores,
    deduplicated and sorted ascending."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0 or K < 2:
        raise ValueError("need nonempty scores and K >= 2")
    return ThresholdGrid(np.quantile(scores, np.linspace(0.0, 1.0, K)), f"quantile({K})")


@dataclass(frozen=True)
class GridRow:
    lam: float
    mu_hat: float
    r_hat: float
    ucb: float
    n_selected: int
    fallback: bool
    feasible: bool
    path: int = 0


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    """Outcome of a calibrator.

    ``lambda_hat`` is ``None`` when the feasible set is empty (greedy and
    uniform). LTT reports ``1.0`` instead, which selects nobody.
    """

    lambda_hat: float | None
    method: str
    alpha: float
    delta: float
    table: tuple
    paths: tuple = ()
    band_halfwidth: float | None = None
    extras: dict = field(default_factory=dict)

    @property
    def abstained(self):
        return self.lambda_hat is None or self.lambda_hat >= 1.0

    @property
    def rule(self):
        return ScreeningRule(None if self.lambda_hat is None else self.lambda_hat)


def select_threshold(lambdas, mu_hat, ucb, alpha):
    """Largest-``mu_hat`` threshold whose bound is at most ``alpha``; ties go to
    the smaller threshold. ``None`` when no threshold is feasible."""
    lambdas = np.asarray(lambdas, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float)
    ucb = np.asarray(ucb, dtype=float)
    ok = (mu_hat > 0) & np.isfinite(ucb) & (ucb <= alpha)
    if not ok.any():
        return None
    idx = np.flatnonzero(ok)
    best = idx[np.lexsort((lambdas[idx], -mu_hat[idx]))[0]]
    return float(lambdas[best])


def _rows(ests, ucbs, fallbacks, alpha, path=0):
    rows = []
    for est, u, fb in zip(ests, ucbs, fallbacks):
        feasible = (not est.empty) and math.isfinite(u) and u <= alpha
        rows.append(GridRow(est.lam, est.mu_hat, est.r_hat, u, est.n_selected, fb, feasible, path))
    return tuple(rows)


def _pointwise(ests, weights, delta, n_min):
    ucbs, fbs = [], []
    for est in ests:
        if est.empty:
            ucbs.append(math.inf)
            fbs.append(False)
            continue
        res = bounds.ucb_pointwise(est, weights, delta, n_min)
        ucbs.append(res.ucb)
        fbs.append(res.fallback_triggered)
    return ucbs, fbs


def _check_levels(alpha, delta):
    if not 0 < alpha < 1 or not 0 < delta < 1:
        raise ValueError("alpha and delta must lie in (0, 1)")


def calibrate_greedy(data, scores, weights, grid, alpha, delta, t0, flavor="et", n_min=10):
    """Maximize ``mu_hat`` subject to the pointwise bound at level ``delta``
    being at most ``alpha``. No simultaneous guarantee."""
    _check_levels(alpha, delta)
    ests = estimate_path(data, scores, weights, grid, t0, flavor)
    ucbs, fbs = _pointwise(ests, weights, delta, n_min)
    lam = select_threshold([e.lam for e in ests], [e.mu_hat for e in ests], ucbs, alpha)
    return CalibrationResult(lam, "greedy", alpha, delta, _rows(ests, ucbs, fbs, alpha))


def multiplier_halfwidth(phi, delta, B=1000, seed=0):
    """Gaussian-multiplier half-width ``q_{1-delta}(max_k |Z_k|) / sqrt(n)``.

    ``phi`` is ``(n, K)``: influence contributions of each subject to each
    threshold's risk estimate. Draw ``b`` uses the stream keyed by ``(seed, b)``.
    """
    phi = np.asarray(phi, dtype=float)
    n = phi.shape[0]
    if phi.size == 0:
        return 0.0
    xi = np.stack([derive_rng(seed, "multiplier", b).standard_normal(n) for b in range(B)])
    z = xi @ phi / math.sqrt(n)
    t_max = np.abs(z).max(axis=1)
    return bounds.upper_quantile(t_max, 1.0 - delta) / math.sqrt(n)


def calibrate_uniform(
    data, scores, weights, grid, alpha, delta, t0, flavor="et", band="multiplier", B=1000, seed=0, n_min=10
):
    """Simultaneous-bound calibration over ``grid``.

    ``band="bonferroni"`` uses pointwise bounds at ``delta / K``.
    ``band="multiplier"`` adds a shared Gaussian-multiplier half-width to every
    ``r_hat``; thresholds selecting fewer than ``n_min`` subjects use the
    finite-sample bound at ``delta / K`` instead. Thresholds selecting nobody
    are excluded from the band and are infeasible.
    """
    _check_levels(alpha, delta)
    ests = estimate_path(data, scores, weights, grid, t0, flavor)
    K = len(ests)
    h = None
    if band == "bonferroni":
        ucbs, fbs = _pointwise(ests, weights, delta / K, n_min)
    elif band == "multiplier":
        live = [e for e in ests if not e.empty]
        phi = np.column_stack([influence(e) for e in live]) if live else np.zeros((0, 0))
        h = multiplier_halfwidth(phi, delta, B, seed)
        ucbs, fbs = [], []
        for est in ests:
            if est.empty:
                ucbs.append(math.inf)
                fbs.append(False)
            elif est.n_selected < n_min:
                ucbs.append(bounds.ucb_finite_sample(est, weights, delta / K).ucb)
                fbs.append(True)
            else:
                ucbs.append(est.r_hat + h)
                fbs.append(False)
    else:
        raise ValueError(f"unknown band {band!r}")
    lam = select_threshold([e.lam for e in ests], [e.mu_hat for e in ests], ucbs, alpha)
    return CalibrationResult(lam, band, alpha, delta, _rows(ests, ucbs, fbs, alpha), band_halfwidth=h)


def fixed_sequence_scan(lambdas, ucb_of, alpha):
    """Walk ``lambdas`` in order, accepting while ``ucb_of(lam) <= alpha``.

    Returns ``(last accepted lambda or 1.0, list of (lam, ucb) evaluated)``;
    nothing after the first failure is evaluated.
    """
    stop = 1.0
    seen = []
    for lam in lambdas:
        u = ucb_of(lam)
        seen.append((lam, u))
        if not u <= alpha:
            break
        stop = lam
    return stop, seen


def ltt_paths(grid, alpha):
    """Two decreasing paths from anchors ``1 - alpha`` and ``1 - alpha/2``
    through the grid values strictly below each anchor."""
    lam = np.asarray(list(grid), dtype=float)
    paths = []
    for anchor in (1.0 - alpha, 1.0 - alpha / 2.0):
        below = np.sort(lam[lam < anchor])[::-1]
        paths.append([anchor] + below.tolist())
    return paths


def calibrate_ltt(data, scores, weights, alpha, delta, t0, flavor="et", n_min=10, grid=None, K=200):
    """Learn-Then-Test: fixed-sequence testing along two paths at level
    ``delta / 2`` each; the result is the smaller of the two stopping points
    (``1.0`` means nothing was accepted)."""
    _check_levels(alpha, delta)
    if grid is None:
        grid = build_grid(scores, K)
    level = delta / 2.0
    rows = []
    stops = []

    def ucb_of(lam, path):
        est = estimate_risk(data, scores, weights, lam, t0, flavor)
        if est.empty:
            rows.append(GridRow(est.lam, 0.0, est.r_hat, math.inf, 0, False, False, path))
            return math.inf
        res = bounds.ucb_pointwise(est, weights, level, n_min)
        rows.append(
            GridRow(est.lam, est.mu_hat, est.r_hat, res.ucb, est.n_selected, res.fallback_triggered,
                    res.ucb <= alpha, path)
        )
        return res.ucb

    for p, path in enumerate(ltt_paths(grid, alpha), start=1):
        stop, seen = fixed_sequence_scan(path, lambda lam: ucb_of(lam, p), alpha)
        stops.append((path[0], stop, len(seen)))
    lam_hat = min(s[1] for s in stops)
    return CalibrationResult(lam_hat, "ltt", alpha, delta, tuple(rows), paths=tuple(stops))


def calibrate(method, data, scores, weights, alpha, delta, t0, flavor="et", n_min=10, K=200, B=1000, seed=0):
    """Dispatch to one of :data:`METHODS` on a ``K``-quantile grid of ``scores``."""
    grid = build_grid(scores, K)
    if method == "greedy":
        return calibrate_greedy(data, scores, weights, grid, alpha, delta, t0, flavor, n_min)
    if method in ("bonferroni", "multiplier"):
        return calibrate_uniform(data, scores, weights, grid, alpha, delta, t0, flavor, method, B, seed, n_min)
    if method == "ltt":
        return calibrate_ltt(data, scores, weights, alpha, delta, t0, flavor, n_min, grid=grid)
    raise ValueError(f"unknown calibration method {method!r}")
