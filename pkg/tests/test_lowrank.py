import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, strategies as st

from tdnnq.lowrank import (
    FACTORIZED_TARGET_RATIO,
    FactorizedLayer,
    factorize_model,
    factorized_params,
    max_useful_rank,
    ranks_for_ratio,
    svd_truncate,
)
from tdnnq.ptq import calibrate, quantize_full
from tdnnq.qat import frame_accuracy, train
from tdnnq.tdnn import TdnnLayer, TdnnModel, forward_float, random_model


def oracle_tail(w, r):
    """sqrt of the discarded squared singular values, via LAPACK gesvd (numpy uses gesdd)."""
    s = scipy.linalg.svd(w, compute_uv=False, lapack_driver="gesvd")
    return float(np.sqrt(np.sum(s[r:] ** 2)))


def test_full_rank_reconstructs():
    w = np.random.default_rng(0).normal(size=(6, 9))
    f = svd_truncate(w, 6)
    assert np.linalg.norm(w - f.dense()) / np.linalg.norm(w) < 1e-6


def test_rank_one_exact():
    rng = np.random.default_rng(1)
    w = np.outer(rng.normal(size=5), rng.normal(size=7))
    f = svd_truncate(w, 1)
    np.testing.assert_allclose(f.dense(), w, atol=1e-12)
    assert f.rank_r == 1 and f.param_count == 12


def test_eight_by_eight_rank_four():
    w = np.random.default_rng(2).normal(size=(8, 8))
    f = svd_truncate(w, 4)
    err2 = np.linalg.norm(w - f.dense()) ** 2
    assert err2 == pytest.approx(oracle_tail(w, 4) ** 2, abs=1e-8)


def test_factor_convention():
    w = np.random.default_rng(3).normal(size=(5, 4))
    f = svd_truncate(w, 3)
    # B has orthonormal rows; A's column norms are the leading singular values, descending
    np.testing.assert_allclose(f.factor_b @ f.factor_b.T, np.eye(3), atol=1e-12)
    norms = np.linalg.norm(f.factor_a, axis=0)
    assert np.all(np.diff(norms) <= 0)
    np.testing.assert_allclose(norms, scipy.linalg.svd(w, compute_uv=False, lapack_driver="gesvd")[:3], rtol=1e-12)


def test_rank_out_of_range():
    w = np.zeros((3, 5))
    for r in (0, 4, -1):
        with pytest.raises(ValueError):
            svd_truncate(w, r)


def test_param_formula():
    for m, n in [(3, 5), (64, 192), (625, 1875), (1, 1)]:
        r_max = max_useful_rank(m, n)
        for r in range(1, min(m, n) + 1):
            assert (factorized_params(m, n, r) < m * n) == (r < m * n / (m + n))
            assert (r <= r_max) == (factorized_params(m, n, r) < m * n)


@given(st.integers(2, 8), st.integers(2, 8), st.data())
def test_prop_eckart_young(m, n, data):
    seed = data.draw(st.integers(0, 2**32 - 1))
    r = data.draw(st.integers(1, min(m, n)))
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(m, n))
    best = np.linalg.norm(w - svd_truncate(w, r).dense())
    for _ in range(20):
        a, b = rng.normal(size=(m, r)), rng.normal(size=(r, n))
        assert np.linalg.norm(w - a @ b) >= best - 1e-9
        # the least-squares optimal A for a random B is no better either
        assert np.linalg.norm(w - (w @ np.linalg.pinv(b)) @ b) >= best - 1e-9


def test_full_rank_model_identical(toy_model, rng):
    ranks = {i: min(l.linear_shape) for i, l in enumerate(toy_model.all_layers)}
    f, rep = factorize_model(toy_model, ranks, as_float32=False)
    x = rng.normal(size=(7, 6))
    np.testing.assert_allclose(forward_float(f, x), forward_float(toy_model, x), atol=1e-5)
    assert rep["params_after"] > rep["params_before"]


def test_factorized_forward_equals_dense_product(toy_model, rng):
    f, _ = factorize_model(toy_model, {0: 2, 1: 3})
    dense = toy_model.with_layers([
        TdnnLayer(l.effective_weights(), l.bias, l.context, l.bn_scale, l.bn_shift) if l.factors is not None else l
        for l in f.all_layers
    ])
    x = rng.normal(size=(3, 8, 6))
    a, b = forward_float(f, x), forward_float(dense, x)
    assert np.abs(a - b).max() <= 1e-6 * np.abs(b).max()


def test_infeasible_rank(toy_model):
    with pytest.raises(ValueError):
        factorize_model(toy_model, {0: 100})
    f, _ = factorize_model(toy_model, {0: 2})
    with pytest.raises(ValueError):
        factorize_model(f, {0: 1})


def test_policies_agree(toy_model):
    by_map, _ = factorize_model(toy_model, {i: 2 for i in range(len(toy_model.all_layers))})
    by_fn, _ = factorize_model(toy_model, lambda i, m, n: 2)
    assert by_map.param_count == by_fn.param_count


def test_ratio_policy_hits_target():
    m = random_model(np.random.default_rng(0), 20, 64, 7, 41)
    f, rep = factorize_model(m, FACTORIZED_TARGET_RATIO)
    assert abs(rep["param_ratio"] - FACTORIZED_TARGET_RATIO) < 0.01
    assert round(rep["param_ratio"], 1) == 0.4
    assert rep["ranks"] == {str(k): v for k, v in ranks_for_ratio(m, FACTORIZED_TARGET_RATIO).items()}
    with pytest.raises(ValueError):
        ranks_for_ratio(m, 0.0)


def test_full_quantization_rejects_factors(small_trained):
    model, _, data = small_trained
    f, _ = factorize_model(model, 0.5)
    with pytest.raises(ValueError):
        quantize_full(f, calibrate(f, data.calib_x), 8)


def test_fine_tune_recovers(small_trained):
    model, _, data = small_trained
    f, _ = factorize_model(model, 0.4)
    before = frame_accuracy(forward_float(f, data.train_x), data.train_y)
    tuned = train(f, data.train_x, data.train_y, epochs=2, lr=1e-3, batch_size=6, seed=0).model
    after = frame_accuracy(forward_float(tuned, data.train_x), data.train_y)
    assert after >= before
    assert all(l.factors is not None for l in tuned.all_layers)


def test_factorized_layer_shape_check():
    with pytest.raises(ValueError):
        FactorizedLayer(np.zeros((3, 2)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        TdnnModel((), TdnnLayer(None, np.zeros(3), (0,), factors=FactorizedLayer(np.zeros((3, 2)), np.zeros((2, 4)))),
                  head_kind="monophone")
