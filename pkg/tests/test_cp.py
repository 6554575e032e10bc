import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netparafac.cp import (AlsConfig, CpModel, align_factors, als_fit, reconstruct, residual,
                           split_half_validate, tcc)
from netparafac.tensor import ShapeError, Tensor3

from conftest import random_model


def test_config_validation():
    with pytest.raises(ValueError):
        AlsConfig(max_iters=0)
    with pytest.raises(ValueError):
        AlsConfig(rel_change_tol=0)
    with pytest.raises(ValueError):
        AlsConfig(init="svd")
    with pytest.raises(ValueError):
        AlsConfig(missing_policy="drop")


def test_model_invariants():
    with pytest.raises(ShapeError):
        CpModel(np.ones((2, 2)), np.ones((2, 1)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        CpModel(np.array([[np.nan]]), [[1.0]], [[1.0]])
    m = random_model((3, 4, 5), 2).normalized()
    for f in (m.A, m.B, m.C):
        np.testing.assert_allclose(np.linalg.norm(f, axis=0), 1.0)
    assert np.all(m.weights >= 0)


def test_reconstruct_examples():
    assert reconstruct(CpModel([[1.0]], [[1.0]], [[1.0]])).values.tolist() == [[[1.0]]]
    ones = np.ones((2, 2))
    np.testing.assert_array_equal(reconstruct(CpModel(ones, ones, ones)).values, np.full((2, 2, 2), 2.0))


def test_reconstruct_entry_formula(rng):
    m = random_model((3, 2, 4), 3, seed=5)
    m.weights = np.array([2.0, 0.5, 1.0])
    full = reconstruct(m).values
    a, b, c = m.A, m.B, m.C
    i, j, k = 2, 1, 3
    assert full[i, j, k] == pytest.approx(sum(m.weights[r] * a[i, r] * b[j, r] * c[k, r] for r in range(3)))


def test_rank_one_recovery():
    a, b, c = np.array([1.0, 2, 3]), np.array([0.5, 1.0]), np.array([1.0, 2, 1, 4])
    x = np.einsum("i,j,k->ijk", a, b, c)
    m = als_fit(x, 1, AlsConfig(seed=0))
    assert np.linalg.norm(m.full() - x) / np.linalg.norm(x) < 1e-8


def test_rank3_recovery_with_alignment():
    truth = random_model((10, 4, 20), 3, seed=11)
    x = truth.full()
    m = als_fit(x, 3, AlsConfig(seed=1, n_init=3, max_iters=1000, rel_change_tol=1e-10))
    assert np.linalg.norm(m.full() - x) / np.linalg.norm(x) < 1e-6
    al = align_factors(truth, m)
    assert al.congruence.min() > 0.99


def test_residual_examples(rng):
    m = random_model((3, 4, 5), 2)
    x = m.full()
    np.testing.assert_allclose(residual(x, m).values, 0, atol=1e-12)
    zero = CpModel(np.zeros((3, 2)), np.zeros((4, 2)), np.zeros((5, 2)))
    np.testing.assert_array_equal(residual(x, zero).values, x)
    with pytest.raises(ShapeError):
        residual(np.zeros((3, 4, 6)), m)


def test_residual_norm_equals_final_fit(rng):
    x = rng.standard_normal((6, 4, 7))
    m = als_fit(x, 2, AlsConfig(seed=3))
    assert residual(x, m).frob_norm() == pytest.approx(m.meta["fit"], rel=1e-9)


def test_residual_keeps_mask(rng):
    x = rng.standard_normal((3, 3, 3))
    mask = rng.random((3, 3, 3)) > 0.2
    m = random_model((3, 3, 3), 1)
    r = residual(Tensor3(x, mask), m)
    np.testing.assert_array_equal(r.observed, Tensor3(x, mask).observed)


def test_als_determinism(rng):
    x = rng.random((5, 3, 8))
    m1 = als_fit(x, 2, AlsConfig(seed=7))
    m2 = als_fit(x, 2, AlsConfig(seed=7))
    for f1, f2 in zip((m1.A, m1.B, m1.C, m1.weights), (m2.A, m2.B, m2.C, m2.weights)):
        assert np.array_equal(f1, f2)


def test_als_errors():
    with pytest.raises(ValueError):
        als_fit(np.ones((2, 2, 2)), 0)
    mask = np.ones((2, 2, 2), bool)
    mask[0] = False
    with pytest.raises(ValueError, match="mode-1"):
        als_fit(Tensor3(np.ones((2, 2, 2)), mask), 1)


def test_warm_start_must_match():
    init = random_model((2, 2, 2), 2)
    with pytest.raises(ShapeError):
        als_fit(np.ones((3, 2, 2)), 2, AlsConfig(init=init))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_als_fit_non_increasing(seed, masked):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 4, 9))
    t = Tensor3(x, rng.random(x.shape) > 0.1) if masked else Tensor3(x)
    h = als_fit(t, 2, AlsConfig(seed=seed, max_iters=60)).meta["history"]
    assert all(b <= a + 1e-10 for a, b in zip(h, h[1:]))


def test_em_imputation_recovers_missing_entries():
    truth = random_model((8, 5, 10), 2, seed=4)
    x = truth.full()
    mask = np.random.default_rng(0).random(x.shape) > 0.15
    m = als_fit(Tensor3(x, mask), 2, AlsConfig(seed=0, n_init=3, max_iters=2000, rel_change_tol=1e-12))
    err = np.abs(m.full() - x)[~mask].max() / np.abs(x).max()
    assert err < 1e-4


def test_model_json_round_trip(tmp_path, rng):
    m = als_fit(rng.random((4, 3, 5)), 2, AlsConfig(seed=0))
    m.save(tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["rank"] == 2 and doc["dims"] == [4, 3, 5]
    assert {"iterations", "fit", "seed"} <= set(doc["meta"])
    back = CpModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.full(), m.full())
    doc["rank"] = 3
    with pytest.raises(ValueError):
        CpModel.from_dict(doc)


def test_tcc_examples():
    assert tcc([1.0, 2.0], [1.0, 2.0]) == 1.0
    assert tcc([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert tcc([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        tcc([0.0, 0.0], [1.0, 1.0])
    with pytest.raises(ValueError):
        tcc([1.0], [1.0, 2.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=8).filter(lambda v: np.linalg.norm(v) > 1e-3),
       st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_tcc_properties(u, scale, seed):
    u = np.array(u)
    v = np.random.default_rng(seed).standard_normal(len(u))
    assert tcc(u, u) == pytest.approx(1.0)
    assert tcc(u, v) == pytest.approx(tcc(v, u))
    assert tcc(scale * u, v) == pytest.approx(tcc(u, v), abs=1e-12)
    assert -1.0 <= tcc(u, v) <= 1.0


def test_align_detects_swap_and_sign():
    ref = random_model((5, 4, 6), 3, seed=2)
    swapped = CpModel(ref.A[:, [1, 0, 2]], ref.B[:, [1, 0, 2]], ref.C[:, [1, 0, 2]])
    al = align_factors(ref, swapped)
    assert al.perm.tolist() == [1, 0, 2]
    assert al.mean_tcc == pytest.approx(1.0)
    neg = CpModel(ref.A * [1, -1, 1], ref.B * [1, -1, 1], ref.C)
    al = align_factors(ref, neg)
    assert al.perm.tolist() == [0, 1, 2]
    assert al.signs[0].tolist() == [1, -1, 1] and al.signs[2].tolist() == [1, 1, 1]
    with pytest.raises(ValueError):
        align_factors(ref, random_model((5, 4, 6), 2))


def test_align_small_perturbation():
    ref = random_model((6, 4, 7), 3, seed=8)
    rng = np.random.default_rng(1)
    other = CpModel(*(f + 1e-6 * rng.standard_normal(f.shape) for f in (ref.A, ref.B, ref.C)))
    al = align_factors(ref, other)
    assert al.perm.tolist() == [0, 1, 2] and al.mean_tcc > 0.999


def test_split_half_on_planted_rank2():
    x = random_model((40, 8, 50), 2, seed=3).full()
    rep = split_half_validate(x, [1, 2, 3, 4], AlsConfig(seed=0, n_init=3), repetitions=3, seed=0)
    accepted = {r.rank: r.accepted for r in rep.records}
    assert accepted[1] and accepted[2]
    assert rep.chosen_R == 2
    for r in rep.records:
        assert -1 <= r.tcc_B <= 1 and -1 <= r.tcc_C <= 1
    assert rep.to_dict()["chosen_R"] == 2


def test_split_half_needs_four_slices():
    with pytest.raises(ValueError):
        split_half_validate(np.ones((3, 2, 2)), [1])
