"""Shared data model: censored datasets, step survival curves, screening rules.

Datasets and curve sets are column-oriented (numpy arrays) so that the
estimators downstream stay vectorized; :class:`CensoredRecord` is the
row view used for validation and I/O.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import AlignmentError, DimensionMismatch, ValidationError


@dataclass(frozen=True)
class CensoredRecord:
    id: str
    covariates: tuple
    observed_time: float
    event: bool


def _as_index(index):
    """Integer or boolean index array; an empty list selects nothing."""
    index = np.asarray(index)
    return index if index.dtype == bool else index.astype(int)


@dataclass(frozen=True, eq=False)
class CensoredDataset:
    """Right-censored observations ``(X_i, min(T_i, C_i), I(T_i < C_i))``.

    Build instances through :func:`validate_dataset` unless the arrays are
    already known to be valid (e.g. freshly simulated).
    """

    ids: np.ndarray
    covariates: np.ndarray
    time: np.ndarray
    event: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ids", np.asarray(self.ids, dtype=object))
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(len(self.ids), -1)
        object.__setattr__(self, "covariates", x)
        object.__setattr__(self, "time", np.asarray(self.time, dtype=float))
        object.__setattr__(self, "event", np.asarray(self.event, dtype=bool))

    def __len__(self):
        return len(self.ids)

    @property
    def n(self):
        return len(self.ids)

    @property
    def dimension(self):
        return self.covariates.shape[1]

    @property
    def records(self):
        return [
            CensoredRecord(str(i), tuple(float(v) for v in x), float(t), bool(e))
            for i, x, t, e in zip(self.ids, self.covariates, self.time, self.event)
        ]

    def subset(self, index):
        index = _as_index(index)
        return CensoredDataset(
            self.ids[index], self.covariates[index], self.time[index], self.event[index]
        )

    def with_events(self, event):
        return CensoredDataset(self.ids, self.covariates, self.time, event)

    def flipped(self):
        """Same records with event indicators replaced by ``1 - E``."""
        return self.with_events(~self.event)


def _as_record(raw, position):
    if isinstance(raw, CensoredRecord):
        return raw.id, raw.covariates, raw.observed_time, raw.event
    if isinstance(raw, Mapping):
        try:
            t = raw["observed_time"] if "observed_time" in raw else raw["time"]
            return raw["id"], raw["covariates"], t, raw["event"]
        except KeyError as exc:
            raise ValidationError("missing field", record_id=raw.get("id", position), field=exc.args[0])
    rid, cov, t, e = raw
    return rid, cov, t, e


def validate_dataset(raw) -> CensoredDataset:
    """Check every record invariant and return a :class:`CensoredDataset`.

    ``raw`` may be a dataset or an iterable of records, mappings with keys
    ``id, covariates, observed_time`` (or ``time``) and ``event``, or ``(id, covariates, time, event)``
    tuples. Raises :class:`ValidationError` naming the first bad record.
    """
    if isinstance(raw, CensoredDataset):
        rows = list(zip(raw.ids, raw.covariates, raw.time, raw.event))
    else:
        rows = [_as_record(r, k) for k, r in enumerate(raw)]
    ids, covs, times, events = [], [], [], []
    seen = set()
    dim = None
    for rid, cov, t, e in rows:
        rid = str(rid)
        if rid in seen:
            raise ValidationError("duplicate id", record_id=rid, field="id")
        seen.add(rid)
        try:
            cov = [float(v) for v in np.atleast_1d(cov)]
        except (TypeError, ValueError):
            raise ValidationError("non-numeric covariate", record_id=rid, field="covariates")
        if dim is None:
            dim = len(cov)
        elif len(cov) != dim:
            raise ValidationError(
                f"expected {dim} covariates, got {len(cov)}", record_id=rid, field="covariates"
            )
        if not all(math.isfinite(v) for v in cov):
            raise ValidationError("non-finite covariate", record_id=rid, field="covariates")
        try:
            t = float(t)
        except (TypeError, ValueError):
            raise ValidationError("non-numeric time", record_id=rid, field="observed_time")
        if not math.isfinite(t) or t < 0:
            raise ValidationError(f"time must be finite and >= 0, got {t}", record_id=rid, field="observed_time")
        if isinstance(e, (bool, np.bool_)):
            e = bool(e)
        elif e in (0, 1) or (isinstance(e, str) and e.strip() in ("0", "1")):
            e = bool(int(e))
        else:
            raise ValidationError(f"event must be 0 or 1, got {e!r}", record_id=rid, field="event")
        ids.append(rid)
        covs.append(cov)
        times.append(t)
        events.append(e)
    dim = 0 if dim is None else dim
    return CensoredDataset(
        np.array(ids, dtype=object),
        np.array(covs, dtype=float).reshape(len(ids), dim),
        np.array(times, dtype=float),
        np.array(events, dtype=bool),
    )


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        if t.size == 0:
            raise ValidationError("time grid is empty", field="times")
        if not np.all(np.isfinite(t)) or t[0] < 0:
            raise ValidationError("grid times must be finite and >= 0", field="times")
        if np.any(np.diff(t) <= 0):
            raise ValidationError("grid times must be strictly increasing", field="times")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    def __len__(self):
        return self.times.size


def _check_curve_values(values, grid, record_id=None):
    v = np.asarray(values, dtype=float)
    if v.shape[-1] != len(grid):
        raise DimensionMismatch(f"curve has {v.shape[-1]} values for a grid of {len(grid)}")
    if not np.all(np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
        raise ValidationError("curve values must lie in [0, 1]", record_id=record_id, field="values")
    if np.any(np.diff(v, axis=-1) > 0):
        raise ValidationError("curve values must be nonincreasing", record_id=record_id, field="values")
    return v


def _step_index(times, t, left):
    return np.searchsorted(times, t, side="left" if left else "right") - 1


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    """Right-continuous nonincreasing step function equal to 1 before the grid."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        if not isinstance(self.grid, TimeGrid):
            object.__setattr__(self, "grid", TimeGrid(self.grid))
        object.__setattr__(self, "values", _check_curve_values(self.values, self.grid))

    def __call__(self, t):
        return evaluate_curve(self, t)

    def left_limit(self, t):
        """Value just before ``t`` (the pre-jump value at a knot)."""
        k = _step_index(self.grid.times, t, left=True)
        out = np.where(k < 0, 1.0, self.values[np.maximum(k, 0)])
        return float(out) if np.ndim(out) == 0 else out


def evaluate_curve(curve: SurvivalCurve, t):
    """Evaluate ``curve`` at ``t`` (scalar or array).

    Returns the value at the largest grid time ``<= t``, 1 before the first
    knot and the last value beyond the grid.
    """
    k = _step_index(curve.grid.times, t, left=False)
    out = np.where(k < 0, 1.0, curve.values[np.maximum(k, 0)])
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class SurvivalCurveSet:
    """Per-subject curves on one shared grid; row ``i`` belongs to ``ids[i]``."""

    ids: np.ndarray
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        if not isinstance(self.grid, TimeGrid):
            object.__setattr__(self, "grid", TimeGrid(self.grid))
        ids = np.asarray(self.ids, dtype=object)
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if v.shape[0] != ids.size:
            raise DimensionMismatch(f"{v.shape[0]} curves for {ids.size} ids")
        if len(set(ids.tolist())) != ids.size:
            raise ValidationError("duplicate id in curve set", field="id")
        _check_curve_values(v, self.grid)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.ids.size

    def curve(self, i):
        return SurvivalCurve(self.grid, self.values[i])

    def _take(self, t, left):
        t = np.asarray(t, dtype=float)
        k = _step_index(self.grid.times, t, left)
        rows = np.arange(len(self))
        if t.ndim == 0:
            vals = self.values[:, max(int(k), 0)]
            return np.ones(len(self)) if k < 0 else vals.copy()
        if t.shape != (len(self),):
            raise DimensionMismatch("per-subject times must have one entry per curve")
        return np.where(k < 0, 1.0, self.values[rows, np.maximum(k, 0)])

    def evaluate(self, t):
        """Evaluate every curve at ``t``; ``t`` is a scalar or one time per subject."""
        return self._take(t, left=False)

    def left_limit(self, t):
        return self._take(t, left=True)

    def covers(self, t):
        return bool(np.all(np.asarray(t) <= self.grid.times[-1]))

    def subset(self, index):
        index = _as_index(index)
        return SurvivalCurveSet(self.ids[index], self.grid, self.values[index])

    def aligned_to(self, ids):
        """Reorder rows to follow ``ids``; every id must be present."""
        pos = {k: i for i, k in enumerate(self.ids.tolist())}
        try:
            idx = np.array([pos[str(k)] for k in ids], dtype=int)
        except KeyError as exc:
            raise AlignmentError(f"no curve for id {exc.args[0]!r}")
        return self.subset(idx)


ABSTAIN = None


@dataclass(frozen=True)
class ScreeningRule:
    """Select subjects whose score strictly exceeds ``threshold``.

    ``threshold=None`` is the abstain sentinel: nobody is selected.
    """

    threshold: float | None
    score_definition: str = "S(t0|x)"

    def __post_init__(self):
        if self.threshold is not None and not 0.0 <= self.threshold <= 1.0:
            raise ValidationError(f"threshold must be in [0, 1], got {self.threshold}", field="threshold")

    @property
    def abstains(self):
        return self.threshold is None

    def apply(self, scores):
        return apply_rule(self, scores)


def apply_rule(rule: ScreeningRule, scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    if rule.threshold is None:
        return np.zeros(scores.shape, dtype=bool)
    return scores > rule.threshold
