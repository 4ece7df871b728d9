import math

import numpy as np
import pytest
from scipy import stats

from conftest import constant_curves
from screencal import simulate
from screencal.core_types import SurvivalCurve, SurvivalCurveSet, TimeGrid
from screencal.errors import AlignmentError
from screencal.ipcw import WeightVector, estimate_risk
from screencal.simulate import (
    SENTINEL_FACTOR,
    CurvePopulation,
    ReplicateConfig,
    ReplicateMetrics,
    RiskOracle,
    aggregate,
    evaluate_selection,
    generate_semisynthetic,
    model_based_benchmark,
    oracle_benchmark,
    run_protocol,
    sample_time_from_curve,
)


def step():
    return SurvivalCurve(TimeGrid([0.0, 2.0, 5.0]), np.array([1.0, 0.5, 0.0]))


def exponential_curves(n, rate=1.0, t_max=12.0, knots=2000):
    grid = np.linspace(t_max / knots, t_max, knots)
    ids = [f"e{i}" for i in range(n)]
    return SurvivalCurveSet(ids, TimeGrid(grid), np.tile(np.exp(-rate * grid), (n, 1)))


# -- inverse-CDF sampling -----------------------------------------------------------------------

@pytest.mark.parametrize("u, expected", [(0.7, 2.0), (0.5, 2.0), (0.2, 5.0), (0.999, 2.0)])
def test_sample_time_examples(u, expected):
    assert sample_time_from_curve(step(), u) == expected


def test_sample_time_sentinel():
    curve = SurvivalCurve(TimeGrid([1.0, 4.0]), np.array([0.9, 0.8]))
    assert sample_time_from_curve(curve, 0.5) == SENTINEL_FACTOR * 4.0
    with pytest.raises(ValueError):
        sample_time_from_curve(curve, 1.0)


def test_row_sampler_matches_scalar():
    rng = np.random.default_rng(0)
    u = rng.uniform(size=200)
    cs = SurvivalCurveSet([f"a{i}" for i in range(200)], TimeGrid([0.0, 2.0, 5.0]), np.tile([1.0, 0.5, 0.0], (200, 1)))
    rows = simulate._sample_rows(cs, u)
    np.testing.assert_array_equal(rows, [sample_time_from_curve(step(), x) for x in u])


def test_inverse_cdf_sup_norm():
    S = exponential_curves(10_000)
    _, truth = generate_semisynthetic(S, constant_curves(S.ids), seed=1)
    T = truth["T"]
    knots = S.grid.times[::20]
    emp = (T[None, :] > knots[:, None]).mean(axis=1)
    assert np.max(np.abs(emp - np.exp(-knots))) <= 0.02


def test_marginals_and_independence():
    S = exponential_curves(4000, rate=1.0)
    G = exponential_curves(4000, rate=0.5)
    _, truth = generate_semisynthetic(S, G, seed=7)
    # the knots discretise time at 0.006, far below the KS resolution at this n
    assert stats.kstest(truth["T"], stats.expon(scale=1.0).cdf).pvalue > 1e-3
    assert stats.kstest(truth["C"], stats.expon(scale=2.0).cdf).pvalue > 1e-3
    # swapping the roles of the curves swaps the marginals, not the streams
    _, swapped = generate_semisynthetic(G, S, seed=7)
    assert stats.kstest(swapped["T"], stats.expon(scale=2.0).cdf).pvalue > 1e-3
    assert abs(stats.spearmanr(truth["T"], truth["C"])[0]) < 0.05


# -- semi-synthetic generation -----------------------------------------------------------------------

def test_no_censoring_gives_all_events():
    S = exponential_curves(50)
    data, truth = generate_semisynthetic(S, constant_curves(S.ids), seed=0)
    assert data.event.all()
    np.testing.assert_array_equal(data.time, truth["T"])


def test_step_curve_gives_fixed_time():
    ids = [str(i) for i in range(20)]
    S = SurvivalCurveSet(ids, TimeGrid([3.0]), np.zeros((20, 1)))
    data, truth = generate_semisynthetic(S, constant_curves(ids), seed=2)
    np.testing.assert_array_equal(truth["T"], 3.0)


def test_generation_deterministic_and_aligned():
    S = exponential_curves(30)
    a, ta = generate_semisynthetic(S, constant_curves(S.ids, 0.9, (1.0, 5.0)), seed=4)
    b, tb = generate_semisynthetic(S, constant_curves(S.ids, 0.9, (1.0, 5.0)), seed=4)
    np.testing.assert_array_equal(ta["T"], tb["T"])
    np.testing.assert_array_equal(a.event, b.event)
    with pytest.raises(AlignmentError):
        generate_semisynthetic(S, constant_curves(list(reversed(S.ids.tolist()))), seed=4)


def test_uncensored_estimator_is_empirical_fraction():
    S = exponential_curves(500)
    data, truth = generate_semisynthetic(S, constant_curves(S.ids), seed=5)
    scores = np.random.default_rng(5).uniform(size=500)
    est = estimate_risk(data, scores, WeightVector(np.ones(500), 1.0), 0.4, 1.0)
    sel = scores > 0.4
    assert est.r_hat == pytest.approx(np.mean(truth["T"][sel] <= 1.0), abs=1e-12)


# -- metrics and benchmarks --------------------------------------------------------------------------

def test_evaluate_selection_examples():
    T = np.array([0.5, 2.0, 3.0, 0.8])
    m = evaluate_selection([True, True, True, False], T, 1.0, "x", 3, 0.4)
    assert (m.yield_, m.replicate, m.threshold) == (3, 3, 0.4)
    assert m.survival_rate == pytest.approx(2 / 3)
    assert m.fdp == pytest.approx(1 / 3)
    assert evaluate_selection(np.array([1, 2]), T, 1.0).survival_rate == 1.0
    empty = evaluate_selection(np.zeros(4, bool), T, 1.0)
    assert empty.yield_ == 0 and empty.survival_rate == 1.0
    assert empty.conditional_survival is None and not empty.selected_any


def test_model_based_and_oracle_benchmarks():
    scores = np.array([0.70, 0.99, 0.85, 0.95])
    np.testing.assert_array_equal(model_based_benchmark(scores, 0.9), [False, True, True, True])
    np.testing.assert_array_equal(oracle_benchmark(scores, 0.9), model_based_benchmark(scores, 0.9))
    assert not model_based_benchmark(scores, 0.999).any()


def test_risk_oracle():
    oracle = RiskOracle([0.5, 0.1, 0.9], [0.2, 0.3, 0.1])
    assert oracle(0.4) == pytest.approx(0.15)
    assert oracle.mass(0.4) == pytest.approx(2 / 3)
    assert math.isnan(oracle(0.95))
    np.testing.assert_allclose(oracle(np.array([0.0, 0.5])), [0.2, 0.1])


def test_risk_oracle_from_population(population):
    oracle = RiskOracle.from_population(population, lambda X: population.event.survival(X, 1.0), 1.0,
                                        n_mc=20_000, seed=0)
    lams = np.quantile(oracle.scores, [0.1, 0.5, 0.9])
    r = oracle(lams)
    assert np.all(np.diff(r) < 0)  # a higher survival threshold selects lower risk


# -- protocol -------------------------------------------------------------------------------------------

def small_config(**kw):
    base = dict(n_train=300, n_cal=200, n_test=100, t0_list=(0.5, 1.0), alpha=0.2, delta=0.1, replicates=2,
                K=30, B=200, bootstrap_B=200, nu=0.5, gamma=0.5)
    base.update(kw)
    return ReplicateConfig(**base)


def test_oracle_only_one_row_per_horizon(population):
    res = run_protocol(small_config(methods=("oracle",), replicates=1), population)
    assert [(m.method, m.t0) for m in res.rows] == [("oracle", 0.5), ("oracle", 1.0)]
    assert not res.failures
    for m in res.rows:
        assert m.yield_ > 0 and m.threshold is not None


def test_protocol_deterministic_and_ordered(population):
    cfg = small_config()
    a, b = run_protocol(cfg, population), run_protocol(cfg, population)
    assert a.rows == b.rows
    assert [(m.replicate, m.t0) for m in a.rows] == sorted((m.replicate, m.t0) for m in a.rows)
    assert [m.method for m in a.rows[: len(cfg.methods)]] == list(cfg.methods)


def test_protocol_independent_of_workers(population):
    cfg = small_config(methods=("greedy", "conformal", "oracle"), replicates=3)
    serial = run_protocol(cfg, population)
    parallel = run_protocol(small_config(methods=("greedy", "conformal", "oracle"), replicates=3, workers=2),
                            population)
    assert serial.rows == parallel.rows


def test_protocol_fixed_models(population):
    cfg = small_config(refit=False, methods=("greedy", "model_based", "oracle"))
    res = run_protocol(cfg, population)
    assert len(res.rows) == 2 * 2 * 3 and not res.failures


def test_curve_population_protocol():
    n = 400
    rng = np.random.default_rng(3)
    X = rng.normal(size=(n, 1))
    grid = np.linspace(0.01, 8.0, 400)
    S = SurvivalCurveSet([f"c{i}" for i in range(n)], TimeGrid(grid), np.exp(-np.exp(0.7 * X) * grid))
    G = SurvivalCurveSet(S.ids, TimeGrid(grid), np.tile(np.exp(-0.3 * grid), (n, 1)))
    pop = CurvePopulation(X, S, G)
    res = run_protocol(small_config(n_train=200, n_cal=120, n_test=80, methods=("bonferroni", "oracle")), pop)
    assert len(res.rows) == 2 * 2 * 2 and not res.failures
    with pytest.raises(AlignmentError):
        CurvePopulation(X[:10], S, G)


def test_failures_are_recorded(population, monkeypatch):
    def broken(*args, **kwargs):
        raise ValueError("boom")

    monkeypatch.setattr(simulate, "calibrate", broken)
    res = run_protocol(small_config(methods=("greedy", "oracle"), replicates=2), population)
    assert res.rows == []
    assert [(r, t0) for r, t0, _ in res.failures] == [(0, 0.5), (0, 1.0), (1, 0.5), (1, 1.0)]
    assert all("boom" in msg for *_, msg in res.failures)


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(methods=("greedy", "magic"))
    with pytest.raises(ValueError):
        small_config(t0_list=(0.0,))
    with pytest.raises(ValueError):
        small_config(gamma="tuned")


# -- aggregation --------------------------------------------------------------------------------------------

def _row(method, r, y, surv):
    return ReplicateMetrics(method, 1.0, r, y, surv, surv if y else None, y > 0)


def test_aggregate_mean_and_two_se():
    (row,) = aggregate([_row("g", 0, 10, 0.9), _row("g", 1, 20, 0.8)])
    assert row.yield_mean == 15 and row.yield_2se == pytest.approx(10.0)
    assert row.survival_mean == pytest.approx(0.85)
    assert row.p_selected == 1.0 and row.replicates == 2


def test_aggregate_conditional_survival_suppressed_when_rarely_selected():
    rows = [_row("g", r, 0, 1.0) for r in range(19)] + [_row("g", 19, 5, 0.6)]
    (row,) = aggregate(rows)
    assert row.p_selected == 0.05
    assert row.csurvival_mean is None and row.csurvival_2se is None
    (one,) = aggregate([_row("g", 0, 3, 0.5)])
    assert math.isnan(one.yield_2se)
