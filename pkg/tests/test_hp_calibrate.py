import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_dataset
from screencal import bounds
from screencal.hp_calibrate import (
    ThresholdGrid,
    build_grid,
    calibrate,
    calibrate_greedy,
    calibrate_ltt,
    calibrate_uniform,
    fixed_sequence_scan,
    ltt_paths,
    multiplier_halfwidth,
    select_threshold,
)
from screencal.ipcw import WeightVector, estimate_risk, influence

TOY_TIME = [0.5, 2.0, 0.7, 3.0, 1.5, 0.2, 4.0, 2.5]
TOY_EVENT = [1, 1, 1, 0, 1, 1, 0, 1]
TOY_SCORES = np.array([0.9, 0.85, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3])


def toy():
    return make_dataset(TOY_TIME, TOY_EVENT), TOY_SCORES, WeightVector(np.ones(8), 1.0)


def random_instance(seed, n=300):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    T = rng.exponential(np.exp(x))
    C = rng.exponential(4.0, size=n)
    data = make_dataset(np.minimum(T, C), T < C, x[:, None])
    scores = np.exp(-np.exp(-x) * 0.5)  # true S(0.5 | x)
    w = WeightVector(np.exp(np.minimum(T, C) / 4.0), float(np.exp(np.minimum(T, C) / 4.0).max()))
    return data, np.clip(scores, 0, 1), w


# -- grid --------------------------------------------------------------------------------------

def test_grid_examples():
    assert build_grid(np.full(10, 0.7), 200).lambdas.tolist() == [0.7]
    assert build_grid([0.1, 0.9], 2).lambdas.tolist() == [0.1, 0.9]
    scores = np.random.default_rng(0).uniform(size=1000)
    grid = build_grid(scores, 200)
    assert len(grid) <= 200
    assert np.all(np.diff(grid.lambdas) > 0)


def test_grid_validation():
    with pytest.raises(ValueError):
        build_grid([], 5)
    with pytest.raises(ValueError):
        ThresholdGrid([-0.1, 0.5])


# -- greedy ------------------------------------------------------------------------------------

def test_select_threshold_hand_trace():
    assert select_threshold([0.9, 0.8, 0.7], [0.2, 0.4, 0.6], [0.07, 0.09, 0.12], 0.1) == 0.8
    assert select_threshold([0.9, 0.8, 0.7], [0.2, 0.4, 0.6], [0.2, 0.3, 0.4], 0.1) is None
    assert select_threshold([0.9, 0.8, 0.7], [0.2, 0.4, 0.6], [0.2, 0.05, 0.4], 0.1) == 0.8


def test_select_threshold_ties_prefer_smaller_lambda():
    assert select_threshold([0.6, 0.5], [0.4, 0.4], [0.05, 0.05], 0.1) == 0.5


def test_greedy_abstains_when_infeasible():
    data, s, w = toy()
    res = calibrate_greedy(data, s, w, build_grid(s, 8), 0.01, 0.1, 1.0)
    assert res.lambda_hat is None and res.abstained
    assert not res.rule.apply(s).any()


def test_greedy_choice_is_feasible_and_maximal():
    data, s, w = random_instance(1)
    res = calibrate_greedy(data, s, w, build_grid(s, 50), 0.2, 0.1, 0.5)
    feasible = [r for r in res.table if r.feasible]
    chosen = [r for r in res.table if r.lam == res.lambda_hat][0]
    assert chosen.ucb <= 0.2
    assert chosen.mu_hat == max(r.mu_hat for r in feasible)


# -- uniform -----------------------------------------------------------------------------------

def test_multiplier_zero_influence():
    assert multiplier_halfwidth(np.zeros((10, 3)), 0.1, B=200, seed=0) == 0.0
    data = make_dataset([5.0] * 6, [1] * 6)
    res = calibrate_uniform(data, np.full(6, 0.9), WeightVector(np.ones(6), 1.0), ThresholdGrid([0.1, 0.5]), 0.1,
                            0.1, 1.0, band="multiplier", B=200, n_min=1)
    assert res.band_halfwidth == 0.0
    assert [r.ucb for r in res.table] == [r.r_hat for r in res.table]


def test_multiplier_golden():
    data, s, w = toy()
    res = calibrate_uniform(data, s, w, ThresholdGrid([0.35, 0.55]), 0.3, 0.1, 1.0, band="multiplier", B=1000,
                            seed=7, n_min=1)
    assert res.band_halfwidth == 0.40159071033493093


def test_multiplier_is_pure_function_of_seed():
    data, s, w = random_instance(2)
    grid = build_grid(s, 30)
    a = calibrate_uniform(data, s, w, grid, 0.2, 0.1, 0.5, band="multiplier", seed=5)
    b = calibrate_uniform(data, s, w, grid, 0.2, 0.1, 0.5, band="multiplier", seed=5)
    c = calibrate_uniform(data, s, w, grid, 0.2, 0.1, 0.5, band="multiplier", seed=6)
    assert a.band_halfwidth == b.band_halfwidth != c.band_halfwidth
    assert a.lambda_hat == b.lambda_hat


def test_multiplier_halfwidth_matches_direct_draws():
    data, s, w = random_instance(3, n=100)
    grid = ThresholdGrid(np.quantile(s, [0.1, 0.3, 0.5, 0.7, 0.9]))
    ests = [estimate_risk(data, s, w, lam, 0.5) for lam in grid]
    phi = np.column_stack([influence(e) for e in ests])
    from screencal.seeding import derive_rng
    t_max = [np.abs(derive_rng(9, "multiplier", b).standard_normal(100) @ phi / 10).max() for b in range(300)]
    expected = np.sort(t_max)[math.ceil(0.9 * 301) - 1] / 10
    assert multiplier_halfwidth(phi, 0.1, B=300, seed=9) == pytest.approx(expected, rel=1e-12)


def test_bonferroni_uses_split_level():
    data, s, w = random_instance(4)
    grid = ThresholdGrid(np.quantile(s, [0.2, 0.5, 0.8]))
    res = calibrate_uniform(data, s, w, grid, 0.2, 0.1, 0.5, band="bonferroni")
    for row in res.table:
        est = estimate_risk(data, s, w, row.lam, 0.5)
        assert row.ucb == bounds.ucb_pointwise(est, w, 0.1 / 3).ucb


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.4), st.floats(0.01, 0.3))
def test_bonferroni_feasible_subset_of_greedy(seed, alpha, delta):
    data, s, w = random_instance(seed, n=150)
    grid = build_grid(s, 40)
    g = calibrate_greedy(data, s, w, grid, alpha, delta, 0.5)
    b = calibrate_uniform(data, s, w, grid, alpha, delta, 0.5, band="bonferroni")
    g_feasible = {r.lam for r in g.table if r.feasible}
    b_feasible = {r.lam for r in b.table if r.feasible}
    assert b_feasible <= g_feasible
    n_g = 0 if g.lambda_hat is None else int(np.sum(s > g.lambda_hat))
    n_b = 0 if b.lambda_hat is None else int(np.sum(s > b.lambda_hat))
    assert n_b <= n_g


def test_uniform_excludes_empty_thresholds():
    data, s, w = toy()
    res = calibrate_uniform(data, s, w, ThresholdGrid([0.5, 0.95]), 0.9, 0.1, 1.0, band="multiplier", B=200)
    empty = [r for r in res.table if r.lam == 0.95][0]
    assert not empty.feasible and math.isinf(empty.ucb)


def test_unknown_band():
    data, s, w = toy()
    with pytest.raises(ValueError):
        calibrate_uniform(data, s, w, ThresholdGrid([0.5]), 0.1, 0.1, 1.0, band="sidak")


# -- LTT --------------------------------------------------------------------------------------------

def test_fixed_sequence_hand_trace():
    ucbs = {0.90: 0.08, 0.85: 0.09, 0.80: 0.12, 0.75: 0.01}
    stop, seen = fixed_sequence_scan([0.90, 0.85, 0.80, 0.75], ucbs.get, 0.1)
    assert stop == 0.85
    assert [lam for lam, _ in seen] == [0.90, 0.85, 0.80]
    stop, seen = fixed_sequence_scan([0.9, 0.8], lambda lam: 0.5, 0.1)
    assert stop == 1.0 and len(seen) == 1


def test_ltt_paths_from_anchors():
    paths = ltt_paths([0.5, 0.85, 0.92, 0.96], 0.1)
    assert paths[0] == [0.9, 0.85, 0.5]
    assert paths[1] == [0.95, 0.92, 0.85, 0.5]


def ltt_toy():
    # scores reach above both anchors so no path starts on an empty selection
    data, _, w = toy()
    return data, np.linspace(0.99, 0.3, 8), w


def _patched_ucb(monkeypatch, table, calls):
    def fake(est, weights, delta, n_min=10):
        calls.append(est.lam)
        return bounds.UcbResult(est.lam, table(est.lam), "delta", delta)
    monkeypatch.setattr(bounds, "ucb_pointwise", fake)


def test_ltt_hand_trace(monkeypatch):
    data, s, w = ltt_toy()
    calls = []
    # path 1 from 0.9: 0.90 -> 0.08, 0.85 -> 0.09, 0.80 -> 0.12; path 2 fails at its anchor
    table = {0.9: 0.08, 0.85: 0.09, 0.8: 0.12, 0.95: 0.5}
    _patched_ucb(monkeypatch, lambda lam: table.get(round(lam, 10), 0.0), calls)
    res = calibrate_ltt(data, s, w, 0.1, 0.1, 1.0, grid=ThresholdGrid([0.5, 0.6, 0.7, 0.8, 0.85]))
    assert res.lambda_hat == 0.85
    assert [p[1] for p in res.paths] == [0.85, 1.0]


def test_ltt_both_anchors_fail(monkeypatch):
    data, s, w = ltt_toy()
    _patched_ucb(monkeypatch, lambda lam: 1.0, [])
    res = calibrate_ltt(data, s, w, 0.1, 0.1, 1.0, grid=ThresholdGrid([0.5, 0.8]))
    assert res.lambda_hat == 1.0 and res.abstained
    assert not res.rule.apply(s).any()


def test_ltt_takes_minimum(monkeypatch):
    data, s, w = ltt_toy()
    # below the anchors both paths share thresholds, so they can only differ at the anchors
    _patched_ucb(monkeypatch, lambda lam: 0.5 if lam == 0.9 else 0.0, [])
    res = calibrate_ltt(data, s, w, 0.1, 0.1, 1.0, grid=ThresholdGrid([0.5, 0.6, 0.7, 0.8]))
    assert [p[1] for p in res.paths] == [1.0, 0.5]
    assert res.lambda_hat == 0.5
    _patched_ucb(monkeypatch, lambda lam: 0.5 if lam == 0.95 else 0.0, [])
    res = calibrate_ltt(data, s, w, 0.1, 0.1, 1.0, grid=ThresholdGrid([0.5, 0.6, 0.7, 0.8]))
    assert [p[1] for p in res.paths] == [0.5, 1.0]
    assert res.lambda_hat == 0.5


def test_ltt_never_evaluates_past_first_failure(monkeypatch):
    data, s, w = random_instance(5)
    grid = build_grid(s, 60)
    calls = []
    real = bounds.ucb_pointwise

    def counting(est, weights, delta, n_min=10):
        calls.append((est.lam, delta))
        return real(est, weights, delta, n_min)

    monkeypatch.setattr(bounds, "ucb_pointwise", counting)
    res = calibrate_ltt(data, s, w, 0.15, 0.1, 0.5, grid=grid)
    assert all(d == 0.05 for _, d in calls)
    paths = ltt_paths(grid, 0.15)
    idx = 0
    for path, (anchor, stop, n_seen) in zip(paths, res.paths):
        seen = [lam for lam, _ in calls[idx:idx + n_seen]]
        idx += n_seen
        assert seen == path[:n_seen]
        rows = [r for r in res.table if r.lam in seen]
        # every evaluated threshold but the last passed
        if n_seen < len(path):
            assert not (rows[-1].ucb <= 0.15)
            assert all(r.ucb <= 0.15 for r in rows[:-1])
    assert idx == len(calls)


def test_ltt_counts_empty_selection_as_failure():
    data, s, w = toy()
    res = calibrate_ltt(data, s, w, 0.5, 0.1, 1.0, grid=ThresholdGrid([0.3]))
    # both anchors (0.75 and 0.875) select subjects; nothing selects above 0.95
    assert res.lambda_hat <= 1.0


def test_dispatcher_and_determinism():
    data, s, w = random_instance(6)
    for method in ("greedy", "bonferroni", "multiplier", "ltt"):
        a = calibrate(method, data, s, w, 0.2, 0.1, 0.5, K=50, B=200, seed=1)
        b = calibrate(method, data, s, w, 0.2, 0.1, 0.5, K=50, B=200, seed=1)
        assert a.lambda_hat == b.lambda_hat and a.method == method
    with pytest.raises(ValueError):
        calibrate("oracle", data, s, w, 0.2, 0.1, 0.5)
    with pytest.raises(ValueError):
        calibrate("greedy", data, s, w, 1.2, 0.1, 0.5)
