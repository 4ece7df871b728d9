"""Survival and censoring models used to score subjects and weight observations.

Two backends are provided: a Cox proportional-hazards fitter (Breslow ties and
baseline, damped Newton) and a parametric Weibull population with known
conditional curves, used as simulation ground truth.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .core_types import CensoredDataset, SurvivalCurve, SurvivalCurveSet, TimeGrid
from .errors import DegenerateDesign, DimensionMismatch, InsufficientData, NonConvergence


@dataclass(frozen=True)
class FitDiagnostics:
    log_partial_likelihood: float
    iterations: int
    gradient_norm: float
    halvings: int = 0
    history: tuple = ()


@dataclass(frozen=True, eq=False)
class CoxModel:
    """Fitted Cox model.

    The baseline is stored for centered covariates (``center``) and exposed for
    ``x = 0`` through :attr:`baseline_cum_hazard`; predictions always go
    through the centered form, which keeps ``exp`` well scaled.
    """

    coefficients: np.ndarray
    center: np.ndarray
    event_times: np.ndarray
    centered_cum_hazard: np.ndarray
    fit_diagnostics: FitDiagnostics = field(default=None)

    @property
    def dimension(self):
        return self.coefficients.size

    @property
    def baseline_cum_hazard(self):
        """Breslow cumulative baseline hazard at ``event_times`` for ``x = 0``."""
        return self.centered_cum_hazard * np.exp(-self.coefficients @ self.center)

    def cumulative_baseline(self, t):
        """Centered baseline cumulative hazard, right-continuous in ``t``."""
        k = np.searchsorted(self.event_times, t, side="right") - 1
        padded = np.concatenate([[0.0], self.centered_cum_hazard])
        return padded[k + 1]

    def relative_risk(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dimension:
            raise DimensionMismatch(f"model has {self.dimension} covariates, got {X.shape[1]}")
        return np.exp((X - self.center) @ self.coefficients)

    def survival(self, X, t):
        """``S(t | x)`` for each row of ``X``; ``t`` is scalar or one time per row."""
        risk = self.relative_risk(X)
        return np.clip(np.exp(-self.cumulative_baseline(t) * risk), 0.0, 1.0)

    @property
    def default_grid(self):
        return TimeGrid(self.event_times if self.event_times.size else np.array([0.0]))


def _sorted_design(data: CensoredDataset):
    order = np.argsort(data.time, kind="stable")
    t = data.time[order]
    e = data.event[order]
    X = data.covariates[order]
    first = np.searchsorted(t, t, side="left")
    return t, e, X, first


def _rev_cumsum(a):
    return np.cumsum(a[::-1], axis=0)[::-1]


def log_partial_likelihood(beta, X, e, first, with_derivatives=True):
    """Breslow log partial likelihood for covariates sorted by time.

    ``first[i]`` is the index of the first subject tied with subject ``i`` so
    that ``i``'s risk set is every index ``>= first[i]``.
    """
    eta = X @ beta
    c = eta.max() if eta.size else 0.0
    w = np.exp(eta - c)
    s0 = _rev_cumsum(w)[first[e]]
    ll = float(np.sum(eta[e]) - np.sum(np.log(s0) + c))
    if not with_derivatives:
        return ll
    wx = w[:, None] * X
    s1 = _rev_cumsum(wx)[first[e]]
    m = s1 / s0[:, None]
    grad = X[e].sum(axis=0) - m.sum(axis=0)
    s2 = _rev_cumsum(wx[:, :, None] * X[:, None, :])[first[e]]
    hess = -(s2 / s0[:, None, None]).sum(axis=0) + m.T @ m
    return ll, grad, hess


def _breslow(t, e, eta, first):
    w = np.exp(eta - eta.max())
    s0 = _rev_cumsum(w)
    times = np.unique(t[e])
    if times.size == 0:
        return times, np.zeros(0)
    grp_first = np.searchsorted(t, times, side="left")
    deaths = np.bincount(np.searchsorted(times, t[e]), minlength=times.size)
    increments = deaths / (s0[grp_first] * np.exp(eta.max()))
    return times, np.cumsum(increments)


def fit_cox(data: CensoredDataset, max_iter=50, tol=1e-9, max_halvings=10) -> CoxModel:
    """Fit a Cox model by damped Newton on the Breslow partial likelihood.

    Convergence is declared when the norm of the gradient of the log partial
    likelihood divided by ``n`` falls to ``tol``. A step that lowers the
    likelihood is halved up to ``max_halvings`` times. Constant covariate
    columns get a zero coefficient with a :class:`DegenerateDesign` warning.
    With no events the likelihood is flat: ``beta = 0`` and the baseline is 0.
    """
    n, d = data.covariates.shape
    if n < 2:
        raise InsufficientData("Cox fit needs at least 2 records")
    t, e, X, first = _sorted_design(data)
    center = X.mean(axis=0) if n else np.zeros(d)
    Xc = X - center
    active = np.ptp(X, axis=0) > 0 if n else np.zeros(d, bool)
    if not np.all(active):
        warnings.warn(
            f"constant covariate columns {np.flatnonzero(~active).tolist()} get coefficient 0",
            DegenerateDesign,
            stacklevel=2,
        )
    beta = np.zeros(d)
    if not e.any():
        diag = FitDiagnostics(0.0, 0, 0.0)
        return CoxModel(beta, center, np.zeros(0), np.zeros(0), diag)

    Xa = Xc[:, active]
    b = np.zeros(Xa.shape[1])
    ll, grad, hess = log_partial_likelihood(b, Xa, e, first)
    history = [ll]
    halvings = 0
    it = 0
    while np.linalg.norm(grad) / n > tol:
        if it >= max_iter:
            raise NonConvergence(
                f"Cox fit did not converge in {max_iter} iterations "
                f"(gradient norm {np.linalg.norm(grad) / n:.3g})"
            )
        it += 1
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        scale = 1.0
        for _ in range(max_halvings + 1):
            cand = b + scale * step
            ll_new = log_partial_likelihood(cand, Xa, e, first, with_derivatives=False)
            # accept ties up to round-off: near the optimum the change in the
            # log likelihood falls below floating-point resolution
            if ll_new >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            scale *= 0.5
            halvings += 1
        else:
            raise NonConvergence("step halving failed to increase the partial likelihood")
        b = cand
        ll, grad, hess = log_partial_likelihood(b, Xa, e, first)
        history.append(ll)
    beta[active] = b
    times, cumhaz = _breslow(t, e, Xc @ beta, first)
    diag = FitDiagnostics(ll, it, float(np.linalg.norm(grad) / n), halvings, tuple(history))
    return CoxModel(beta, center, times, cumhaz, diag)


def fit_censoring(data: CensoredDataset, **kwargs) -> CoxModel:
    """Censoring model: :func:`fit_cox` on the data with events flipped."""
    return fit_cox(data.flipped(), **kwargs)


def predict_survival(model: CoxModel, covariates, grid: TimeGrid | None = None) -> SurvivalCurve:
    """``S(t|x) = exp(-L0(t) exp(b'x))`` for one subject on ``grid``."""
    x = np.asarray(covariates, dtype=float).ravel()
    if x.size != model.dimension:
        raise DimensionMismatch(f"model has {model.dimension} covariates, got {x.size}")
    grid = grid if grid is not None else model.default_grid
    risk = model.relative_risk(x[None, :])[0]
    vals = np.clip(np.exp(-model.cumulative_baseline(grid.times) * risk), 0.0, 1.0)
    return SurvivalCurve(grid, np.minimum.accumulate(vals))


def predict_curves(model, X, ids, grid: TimeGrid | None = None) -> SurvivalCurveSet:
    """Curve set for many subjects; the default grid is the model's event times,
    which makes the step representation exact for a Cox model."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if grid is None:
        grid = model.default_grid
    vals = model.survival_matrix(X, grid.times) if hasattr(model, "survival_matrix") else None
    if vals is None:
        risk = model.relative_risk(X)
        vals = np.exp(-np.outer(risk, model.cumulative_baseline(grid.times)))
    vals = np.minimum.accumulate(np.clip(vals, 0.0, 1.0), axis=1)
    return SurvivalCurveSet(np.asarray(ids, dtype=object), grid, vals)


@dataclass(frozen=True)
class WeibullModel:
    """``T | x ~ Weibull(shape, scale(x))`` with ``scale(x) = exp(intercept + w'x)``."""

    shape: float
    intercept: float
    weights: tuple

    def __post_init__(self):
        if not self.shape > 0:
            raise ValueError("Weibull shape must be positive")
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @property
    def dimension(self):
        return len(self.weights)

    def scale(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dimension:
            raise DimensionMismatch(f"model has {self.dimension} covariates, got {X.shape[1]}")
        return np.exp(self.intercept + X @ np.asarray(self.weights))

    def survival(self, X, t):
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        return np.exp(-((t / self.scale(X)) ** self.shape))

    def survival_matrix(self, X, times):
        s = self.scale(X)
        return np.exp(-((np.asarray(times)[None, :] / s[:, None]) ** self.shape))

    def sample(self, X, u):
        return self.scale(X) * (-np.log(u)) ** (1.0 / self.shape)


@dataclass(frozen=True)
class WeibullPopulation:
    """Synthetic population: Gaussian covariates, Weibull event and censoring times.

    Covariates are i.i.d. ``N(0, covariate_sd^2)`` in each of ``dimension``
    coordinates. Both Weibull models are proportional-hazards models, so a Cox
    fit is correctly specified for either.
    """

    event: WeibullModel
    censoring: WeibullModel
    covariate_sd: float = 1.0

    def __post_init__(self):
        if self.event.dimension != self.censoring.dimension:
            raise DimensionMismatch("event and censoring models disagree on dimension")

    @property
    def dimension(self):
        return self.event.dimension

    def sample_covariates(self, n, rng):
        return rng.normal(0.0, self.covariate_sd, size=(n, self.dimension))

    def risk(self, X, t0):
        """True conditional event probability ``P(T <= t0 | x)``."""
        return 1.0 - self.event.survival(X, t0)


def sample_weibull(pop, covariates, u, which="event"):
    """Inverse-CDF draw ``scale(x) * (-log u)^(1/k)``; deterministic in ``(x, u)``.

    ``pop`` is a :class:`WeibullPopulation` (use ``which`` to pick the event or
    censoring law) or a bare :class:`WeibullModel`.
    """
    model = pop if isinstance(pop, WeibullModel) else getattr(pop, which)
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise ValueError("u must lie in (0, 1)")
    out = model.sample(np.atleast_2d(covariates), u)
    return float(out[0]) if np.ndim(u) == 0 and out.size == 1 else out
