import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from netparafac import datagen
from netparafac.features import (FEATURE_NAMES, Gmm2, ScalingParams, extract_features,
                                 feature_matrix, fit_gmm2, fit_scaling, gmm_likelihood_features,
                                 preprocess, write_feature_csv)
from netparafac.pipeline import ud_residuals


def test_preprocess_endpoints():
    raw = np.array([[[0.0, 5.0, 99.0]]])  # one entity, one metric
    params = ScalingParams([0.0], [np.log1p(99.0)])
    scaled, _ = preprocess(raw, params)
    assert scaled[0, 0, 0] == 0.0 and scaled[0, 0, 2] == 1.0


def test_preprocess_degenerate_and_negative():
    scaled, p = preprocess(np.full((2, 1, 3), 4.0))
    assert np.all(scaled == 0) and p.lo[0] == p.hi[0]
    with pytest.raises(ValueError):
        preprocess(np.array([[[-1.0]]]))
    with pytest.raises(ValueError):
        ScalingParams([1.0], [0.0])


def test_scaling_from_training_split_only():
    train = np.random.default_rng(0).random((3, 4, 10)) * 100
    test = train * 3
    p = fit_scaling(train)
    a, _ = preprocess(test, p)
    b, _ = preprocess(test, p)
    assert np.array_equal(a, b) and a.max() > 1  # not refitted on the test split
    assert ScalingParams.from_dict(p.to_dict()).hi.tolist() == p.hi.tolist()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1e9), min_size=2, max_size=30))
def test_preprocess_monotone(values):
    v = np.array(values)
    scaled, _ = preprocess(v[None, None, :])
    order = np.argsort(v, kind="stable")
    assert np.all(np.diff(scaled[0, 0, order]) >= 0)


def test_extract_features_examples():
    f = extract_features(np.zeros(4), "u", 0)
    assert f.values.tolist() == [0.0] * 6
    f = extract_features(np.array([0.0, 0.0, 1.0, 3.0]), "u", 0)
    assert f.values[5] == 2.0
    with pytest.raises(ValueError):
        extract_features(np.zeros(3), "u", 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 10), st.integers(0, 1000))
def test_features_linear(alpha, seed):
    r = np.random.default_rng(seed).standard_normal((2, 4, 5))
    np.testing.assert_allclose(feature_matrix(alpha * r), alpha * feature_matrix(r), atol=1e-12)


def test_feature_matrix_layout():
    r = np.random.default_rng(0).standard_normal((2, 4, 5))
    f = feature_matrix(r)
    assert f.shape == (2, 5, 6)
    np.testing.assert_allclose(f[1, 3], extract_features(r[1], "x", 3).values)
    np.testing.assert_allclose(f[..., 4], r[:, 1] - r[:, 0])


def _auc(pos, neg):
    # Mann-Whitney estimate of P(pos > neg)
    allv = np.concatenate([pos, neg])
    ranks = allv.argsort().argsort() + 1.0
    return (ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg))


def test_difference_of_packets_separates_attacks():
    days = datagen.gen_traffic(40, 4, seed=0)
    days, _, _ = datagen.inject_attacks(days, q=0.1, attacks_per_day=3, seed=1)
    tr = [d for d in days if d.day < 2]
    te = [d for d in days if d.day >= 2]
    _, _, res = ud_residuals(tr, te, 2)
    f = feature_matrix(res)[..., 5].ravel()
    y = np.stack([d.attack_labels for d in te]).ravel()
    assert y.any()
    assert _auc(f[y], f[~y]) > 0.9


def test_gmm_recovers_separated_clusters():
    rng = np.random.default_rng(0)
    c0, c1 = np.zeros(6), np.full(6, 5.0)
    x = np.vstack([c0 + 0.3 * rng.standard_normal((600, 6)), c1 + 0.3 * rng.standard_normal((300, 6))])
    g = fit_gmm2(x, seed=0)
    assert np.abs(g.means[0] - x[:600].mean(0)).max() < 0.05
    assert np.abs(g.means[1] - x[600:].mean(0)).max() < 0.05
    assert g.weights[0] == pytest.approx(2 / 3, abs=1e-3)


def test_gmm_rejects_identical_points():
    with pytest.raises(ValueError):
        fit_gmm2(np.ones((10, 6)))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_gmm_em_monotone(seed):
    x = np.random.default_rng(seed).standard_normal((200, 6))
    h = fit_gmm2(x, seed=seed).meta["history"]
    assert all(b >= a - 1e-8 * abs(a) for a, b in zip(h, h[1:]))


def test_gmm_likelihood_features():
    g = Gmm2([0.5, 0.5], [np.zeros(6), np.full(6, 4.0)], [np.ones(6), np.ones(6)])
    lp = gmm_likelihood_features(np.zeros(6), g)
    assert lp[0] > lp[1]
    mid = gmm_likelihood_features(np.full(6, 2.0), g)
    assert mid[0] == pytest.approx(mid[1])
    assert gmm_likelihood_features(np.zeros((3, 5, 6)), g).shape == (3, 5, 2)
    f = extract_features(np.zeros(4), "u", 0)
    np.testing.assert_allclose(gmm_likelihood_features(f, g), lp)


def test_gmm_marginal_density_integrates_to_one():
    g = Gmm2([0.7, 0.3], [np.zeros(6), np.arange(6.0)], [np.full(6, 0.5), np.arange(1.0, 7.0)])
    for c in range(2):
        m, v = g.means[c, 0], g.variances[c, 0]
        dens = lambda t: np.exp(-0.5 * (t - m) ** 2 / v) / np.sqrt(2 * np.pi * v)
        total, _ = integrate.quad(dens, -np.inf, np.inf)
        assert total == pytest.approx(1.0, abs=1e-8)
        # the logpdf of the 1-d marginal equals the same formula
        pt = np.zeros((1, 6))
        pt[0] = g.means[c]
        pt[0, 0] = m + 0.7
        rest = -0.5 * np.log(2 * np.pi * g.variances[c, 1:]).sum()
        assert g.component_logpdf(pt)[0, c] - rest == pytest.approx(np.log(dens(m + 0.7)))


def test_gmm_json_round_trip(tmp_path):
    g = fit_gmm2(np.random.default_rng(1).standard_normal((50, 6)))
    g.save(tmp_path / "g.json")
    back = Gmm2.load(tmp_path / "g.json")
    np.testing.assert_array_equal(back.means, g.means)


def test_feature_csv_header(tmp_path):
    write_feature_csv(tmp_path / "f.csv", np.zeros((2, 8)), ["a", "b"], [0, 1], labels=[0, 1])
    header = next(csv.reader(open(tmp_path / "f.csv")))
    assert header == ["entity", "minute", *FEATURE_NAMES, "label"]
