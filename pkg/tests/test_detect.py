import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from netparafac.detect import (MapAggregatorParams, aggregate_sync, evaluate, label_runs,
                               map_threshold, train_logistic)
from netparafac.forest import ForestConfig, ForestModel, gini_importance, train_forest


# ------------------------------------------------------------- evaluation


def test_perfect_predictions():
    y = np.zeros((2, 10), bool)
    y[0, 2:4] = y[1, 7:9] = True
    rep = evaluate(y, y)
    assert rep.precision == 1.0 and rep.detection_accuracy == 1.0
    assert rep.delays == [1, 1] and rep.precision_defined


def test_no_positive_predictions():
    y = np.zeros((1, 10), bool)
    y[0, 3:5] = True
    rep = evaluate(np.zeros_like(y), y)
    assert rep.detection_accuracy == 0.0
    assert rep.precision == 1.0 and not rep.precision_defined


def test_hand_built_three_attacks():
    truth = np.zeros((3, 12), bool)
    truth[0, 1:4] = True   # detected at its 2nd minute
    truth[1, 5:7] = True   # missed
    truth[2, 8:10] = True  # detected at its 1st minute
    pred = np.zeros_like(truth)
    pred[0, 2] = pred[0, 3] = True
    pred[2, 8] = True
    pred[1, 0] = True      # one false-positive minute
    rep = evaluate(pred, truth)
    assert rep.detection_accuracy == pytest.approx(2 / 3)
    assert (rep.tp, rep.fp, rep.fn) == (3, 1, 4)
    assert rep.precision == pytest.approx(3 / 4)
    assert sorted(rep.delays) == [1, 2]
    assert rep.delay_fraction(1) == 0.5


def test_evaluate_misaligned():
    with pytest.raises(ValueError):
        evaluate(np.zeros((2, 3)), np.zeros((3, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_metrics_scale_free(seed):
    rng = np.random.default_rng(seed)
    truth = rng.random((4, 30)) < 0.1
    pred = rng.random((4, 30)) < 0.15
    a = evaluate(pred, truth)
    b = evaluate(np.vstack([pred, pred]), np.vstack([truth, truth]))
    assert a.precision == b.precision
    assert a.detection_accuracy == b.detection_accuracy or (np.isnan(a.detection_accuracy)
                                                            and np.isnan(b.detection_accuracy))


def test_label_runs():
    assert label_runs([[0, 1, 1, 0, 1], [1, 0, 0, 0, 0]]) == [(0, 1, 3), (0, 4, 5), (1, 0, 1)]


def test_report_serialization():
    y = np.array([[0, 1, 1, 0]], bool)
    rep = evaluate(y, y)
    assert '"precision": 1.0' in rep.to_json()
    assert "Detection Accuracy" in rep.table()


# -------------------------------------------------------------------- MAP


DEPLOYMENT = dict(n_homes=812, prior_attack=0.0014, p_fp=2.64e-6, p_rc=0.8266, q=0.05)


def test_map_threshold_deployment_parameters():
    thr = map_threshold(MapAggregatorParams(**DEPLOYMENT))
    assert thr.threshold == 5 and 4 <= thr.m0 < 5
    assert thr.m0 == pytest.approx(4.21, abs=0.01)
    assert float(f"{thr.type1:.1e}") == pytest.approx(3.7e-16)


def test_type1_matches_binomial_tail_oracle():
    # independent oracle: explicit sum of the binomial pmf above the threshold
    n, p = 812, 2.64e-6
    tail = sum(math.comb(n, k) * p ** k * (1 - p) ** (n - k) for k in range(5, 40))
    assert map_threshold(MapAggregatorParams(**DEPLOYMENT)).type1 == pytest.approx(tail, rel=1e-9)


def test_mixture_type2_is_binomial_cdf():
    p1 = 0.05 * 0.8266 + 0.95 * 2.64e-6
    assert map_threshold(MapAggregatorParams(**DEPLOYMENT)).type2 == pytest.approx(stats.binom.cdf(4, 812, p1))


def test_split_h1_model():
    thr = map_threshold(MapAggregatorParams(**DEPLOYMENT), h1_model="split")
    assert thr.h1_model == "split" and thr.threshold >= 1
    assert thr.threshold - 1 <= thr.m0 <= thr.threshold


def test_map_errors():
    with pytest.raises(ValueError):
        map_threshold(MapAggregatorParams(**{**DEPLOYMENT, "p_rc": DEPLOYMENT["p_fp"]}))
    with pytest.raises(ValueError):
        map_threshold(MapAggregatorParams(**{**DEPLOYMENT, "p_fp": 0.0}))
    with pytest.raises(ValueError):
        MapAggregatorParams(**{**DEPLOYMENT, "q": 1e-4})
    with pytest.raises(ValueError):
        MapAggregatorParams(**{**DEPLOYMENT, "p_rc": 1.5})
    with pytest.raises(ValueError):
        map_threshold(MapAggregatorParams(**DEPLOYMENT), h1_model="other")


@settings(max_examples=40, deadline=None)
@given(st.floats(0.3, 0.95), st.floats(0.02, 0.3), st.floats(1e-7, 1e-4), st.floats(1.01, 3.0))
def test_map_threshold_monotone_in_false_positive_rate(p_rc, q, p_fp, factor):
    t0 = map_threshold(MapAggregatorParams(812, 0.0014, p_fp, p_rc, q)).threshold
    assert map_threshold(MapAggregatorParams(812, 0.0014, p_fp * factor, p_rc, q)).threshold >= t0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.3, 0.99), st.floats(0.02, 0.5), st.floats(1e-7, 1e-4))
def test_map_threshold_is_first_count_favouring_attack(p_rc, q, p_fp):
    # posterior log odds from scipy pmfs; the threshold is where they turn positive
    n, pd = 812, 0.0014
    thr = map_threshold(MapAggregatorParams(n, pd, p_fp, p_rc, q)).threshold
    p1 = q * p_rc + (1 - q) * p_fp
    odds = lambda m: (stats.binom.logpmf(m, n, p1) - stats.binom.logpmf(m, n, p_fp)
                      + math.log(pd / (1 - pd)))
    assert odds(thr) >= 0 and odds(thr - 1) < 0


def test_higher_recall_can_raise_the_threshold():
    # under the MAP rule a larger attack signal moves evidence away from small counts
    lo = map_threshold(MapAggregatorParams(**{**DEPLOYMENT, "p_rc": 0.5})).threshold
    hi = map_threshold(MapAggregatorParams(**{**DEPLOYMENT, "p_rc": 0.99})).threshold
    assert lo <= 5 <= hi and lo < hi


def test_aggregate_sync_examples():
    assert not aggregate_sync(np.zeros((10, 5)), 3).any()
    flags = np.zeros((10, 2), bool)
    flags[:3, 0] = True
    flags[:2, 1] = True
    assert aggregate_sync(flags, 3).tolist() == [True, False]
    with pytest.raises(ValueError):
        aggregate_sync(flags, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_aggregate_sync_monotone(seed, thr):
    rng = np.random.default_rng(seed)
    flags = rng.random((12, 20)) < 0.3
    more = flags | (rng.random((12, 20)) < 0.2)
    assert np.all(aggregate_sync(more, thr) >= aggregate_sync(flags, thr))


def test_no_false_verdicts_under_h0():
    rng = np.random.default_rng(0)
    thr = map_threshold(MapAggregatorParams(**DEPLOYMENT)).threshold
    counts = rng.binomial(812, 2.64e-6, size=1_000_000)
    assert (counts >= thr).sum() == 0


# ----------------------------------------------------------------- forest


def test_separable_training_accuracy():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((200, 2))
    y = (x[:, 0] + x[:, 1] > 0).astype(int)
    m = train_forest(x, y, ForestConfig(n_trees=10, min_samples_leaf=1, seed=0))
    assert (m.predict(x) == y).mean() == 1.0


def test_xor():
    x = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    y = np.array([0, 1, 1, 0])
    cfg = ForestConfig(n_trees=1, min_samples_leaf=1, max_features="all", bootstrap=False)
    m = train_forest(x, y, cfg)
    assert m.trees[0].depth == 2 and (m.predict(x) == y).all()
    forest = train_forest(np.repeat(x, 10, 0), np.repeat(y, 10), ForestConfig(n_trees=20, min_samples_leaf=1))
    assert (forest.predict(x) == y).all()


def test_tree_invariants():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((300, 4))
    y = (x[:, 0] > 0.3).astype(int)
    m = train_forest(x, y, ForestConfig(n_trees=5, seed=2))
    for t in m.trees:
        internal = t.feature >= 0
        assert np.all(t.left[internal] > 0) and np.all(t.right[internal] > 0)
        np.testing.assert_allclose(t.value.sum(1), 1.0)


def test_constant_feature_changes_nothing():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((300, 3))
    y = (x[:, 1] - x[:, 2] > 0).astype(int)
    cfg = ForestConfig(n_trees=10, seed=4)
    m1 = train_forest(x, y, cfg)
    x2 = np.hstack([x, np.full((300, 1), 7.0)])
    m2 = train_forest(x2, y, cfg)
    assert np.array_equal(m1.predict_proba(x), m2.predict_proba(x2))
    imp = gini_importance(m2)
    assert imp[3] == 0.0 and imp.sum() == pytest.approx(1.0)


def test_single_splitting_feature_importance():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((400, 3))
    y = (x[:, 2] > 0).astype(int)
    imp = gini_importance(train_forest(x, y, ForestConfig(n_trees=10, min_samples_leaf=1,
                                                          max_features="all", seed=0)))
    assert imp[2] > 0.99


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_importance_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((80, 4))
    y = rng.integers(0, 2, 80)
    imp = gini_importance(train_forest(x, y, ForestConfig(n_trees=5, seed=seed)))
    assert imp.sum() == pytest.approx(1.0) and np.all(imp >= 0)


def test_forest_determinism_and_json(tmp_path):
    rng = np.random.default_rng(6)
    x = rng.standard_normal((150, 3))
    y = (x[:, 0] > 0).astype(int)
    a = train_forest(x, y, ForestConfig(n_trees=5, seed=9))
    b = train_forest(x, y, ForestConfig(n_trees=5, seed=9))
    assert np.array_equal(a.predict_proba(x), b.predict_proba(x))
    a.save(tmp_path / "f.json")
    c = ForestModel.load(tmp_path / "f.json")
    assert np.array_equal(a.predict_proba(x), c.predict_proba(x))


def test_forest_input_checks(caplog):
    with pytest.raises(ValueError):
        train_forest(np.zeros((3, 2)), [0, 1])
    with pytest.raises(ValueError):
        train_forest(np.array([[np.nan]]), [0])
    m = train_forest(np.random.default_rng(0).random((10, 2)), np.ones(10, int))
    assert "single-class" in caplog.text
    assert (m.predict(np.zeros((3, 2))) == 1).all()
    with pytest.raises(ValueError):
        m.predict(np.zeros((3, 5)))


def test_logistic_baseline():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((400, 3))
    y = (2 * x[:, 0] - x[:, 1] > 0).astype(int)
    m = train_logistic(x, y)
    assert (m.predict(x) == y).mean() > 0.97
    assert m.coef[0] > 0 > m.coef[1]
    p = m.predict_proba(x)
    np.testing.assert_allclose(p.sum(1), 1.0)
    yb = (x[:, 0] > 1.8).astype(int)
    mb = train_logistic(x, yb, class_weight="balanced")
    assert mb.predict(x)[yb == 1].mean() > 0.9
