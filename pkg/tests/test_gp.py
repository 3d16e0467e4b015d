import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decgp.errors import ConditioningError, ContractError
from decgp.gp import (
    Dataset,
    ExpertModel,
    HyperParams,
    cholesky_with_jitter,
    covariance_matrix,
    full_gp_predict,
    kernel_eval,
    local_predict,
    nll,
    nll_and_grad,
    nll_grad,
)

THETA = HyperParams((1.2, 0.3), 1.3, 0.1)


def random_dataset(rng, n, d=2, scale=2.0):
    return Dataset(rng.uniform(0, scale, (n, d)), rng.standard_normal(n))


def fd_grad(ds, log_theta, h=1e-6):
    g = np.empty_like(log_theta)
    for j in range(len(log_theta)):
        e = np.zeros_like(log_theta)
        e[j] = h
        g[j] = (nll(ds, HyperParams.from_log(log_theta + e)) - nll(ds, HyperParams.from_log(log_theta - e))) / (2 * h)
    return g


# --- HyperParams / Dataset -------------------------------------------------

def test_hyperparams_reject_nonpositive():
    with pytest.raises(ContractError):
        HyperParams((1.0, -1.0), 1.0, 0.1)
    with pytest.raises(ContractError):
        HyperParams((1.0,), 0.0, 0.1)


@given(st.lists(st.floats(1e-3, 1e3), min_size=3, max_size=6))
def test_log_round_trip(vals):
    h = HyperParams.from_vector(vals)
    back = HyperParams.from_log(h.to_log())
    np.testing.assert_allclose(back.to_vector(), h.to_vector(), rtol=1e-14)


def test_dataset_shape_contract():
    with pytest.raises(ContractError):
        Dataset(np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(ContractError):
        Dataset(np.zeros((0, 2)), np.zeros(0))


def test_dataset_is_read_only():
    ds = Dataset(np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        ds.outputs[0] = 1.0


def test_deduplicated_keeps_first_occurrence_order():
    X = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 0.0], [2.0, 2.0]])
    ds = Dataset(X, np.array([1.0, 2.0, 3.0, 4.0])).deduplicated()
    np.testing.assert_array_equal(ds.outputs, [1.0, 2.0, 4.0])


# --- kernel ----------------------------------------------------------------

def test_kernel_zero_distance_is_signal_variance():
    assert kernel_eval([0.4, 1.1], [0.4, 1.1], THETA) == pytest.approx(1.69, abs=1e-15)


def test_kernel_one_lengthscale_apart():
    assert kernel_eval([0, 0], [1.2, 0], THETA) == pytest.approx(1.69 * math.exp(-1), abs=1e-12)
    assert kernel_eval([0, 0], [1.2, 0], THETA) == pytest.approx(0.621717, abs=1e-6)


def test_kernel_symmetry():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b = rng.uniform(-3, 3, (2, 2))
        assert kernel_eval(a, b, THETA) == kernel_eval(b, a, THETA)


def test_kernel_dimension_mismatch():
    with pytest.raises(ContractError):
        kernel_eval([0, 0, 0], [0, 0, 0], THETA)


def test_covariance_single_point_with_noise():
    C = covariance_matrix([[0.3, 0.3]], [[0.3, 0.3]], THETA, add_noise=True)
    np.testing.assert_allclose(C, [[1.69 + 0.01]])


def test_covariance_is_spd():
    X = np.random.default_rng(1).uniform(0, 2, (5, 2))
    C = covariance_matrix(X, X, THETA, add_noise=True)
    np.testing.assert_allclose(C, C.T)
    assert np.linalg.eigvalsh(C).min() > 0
    np.linalg.cholesky(C)


def test_covariance_transpose_relation():
    rng = np.random.default_rng(2)
    A, B = rng.uniform(0, 2, (3, 2)), rng.uniform(0, 2, (4, 2))
    K = covariance_matrix(A, B, THETA)
    assert K.shape == (3, 4)
    np.testing.assert_allclose(K, covariance_matrix(B, A, THETA).T)
    for i in range(3):
        for j in range(4):
            assert K[i, j] == pytest.approx(kernel_eval(A[i], B[j], THETA), rel=1e-14)


def test_covariance_noise_needs_same_points():
    with pytest.raises(ContractError):
        covariance_matrix(np.zeros((2, 2)), np.ones((2, 2)), THETA, add_noise=True)


def test_jitter_rescues_duplicate_rows():
    X = np.zeros((4, 2))
    K = covariance_matrix(X, X, THETA)  # rank one, no noise
    L = cholesky_with_jitter(K)
    assert np.all(np.diag(L) > 0)
    assert np.linalg.norm(L @ L.T - K) / np.linalg.norm(K) < 1e-6


def test_jitter_gives_up_on_indefinite():
    with pytest.raises(ConditioningError):
        cholesky_with_jitter(np.array([[1.0, 2.0], [2.0, 1.0]]))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 25), st.floats(1e-4, 1.0), st.integers(0, 10_000))
def test_psd_safety_under_jitter(n, noise, seed):
    X = np.random.default_rng(seed).uniform(0, 2, (n, 2))
    h = HyperParams((1.2, 0.3), 1.3, noise)
    C = covariance_matrix(X, X, h, add_noise=True)
    L = cholesky_with_jitter(C)
    assert np.all(np.diag(L) > 0)


# --- likelihood --------------------------------------------------------------

def test_nll_single_zero_output():
    ds = Dataset([[0.5, 0.5]], [0.0])
    assert nll(ds, THETA) == pytest.approx(math.log(1.69 + 0.01), rel=1e-14)


def test_nll_two_point_dense_oracle():
    X = np.array([[0.0, 0.0], [0.3, 0.1]])
    y = np.array([0.7, -0.2])
    C = covariance_matrix(X, X, THETA, add_noise=True)
    a, b, d = C[0, 0], C[0, 1], C[1, 1]
    det = a * d - b * b
    inv = np.array([[d, -b], [-b, a]]) / det
    assert nll(Dataset(X, y), THETA) == pytest.approx(y @ inv @ y + math.log(det), rel=1e-12)


def test_nll_prefers_true_theta():
    from decgp.experiments import synth_field

    wins = 0
    scaled = HyperParams.from_vector(THETA.to_vector() * 10)
    for seed in range(20):
        ds = synth_field(200, THETA, seed).data
        wins += nll(ds, THETA) <= nll(ds, scaled)
    assert wins > 10


def test_grad_zero_outputs_fd():
    rng = np.random.default_rng(3)
    ds = Dataset(rng.uniform(0, 2, (15, 2)), np.zeros(15))
    lt = THETA.to_log()
    np.testing.assert_allclose(nll_grad(ds, lt), fd_grad(ds, lt), rtol=1e-5, atol=1e-8)


def test_grad_random_fd():
    rng = np.random.default_rng(4)
    ds = random_dataset(rng, 30)
    lt = np.log([0.8, 0.5, 1.1, 0.3])
    np.testing.assert_allclose(nll_grad(ds, lt), fd_grad(ds, lt), rtol=1e-5, atol=1e-8)


def test_nll_and_grad_value_matches_nll():
    ds = random_dataset(np.random.default_rng(5), 12)
    v, _ = nll_and_grad(ds, THETA.to_log())
    assert v == pytest.approx(nll(ds, THETA), rel=1e-12)


def test_grad_vanishes_at_1d_stationary_point():
    from scipy.optimize import brentq

    rng = np.random.default_rng(6)
    X = rng.uniform(0, 2, (30, 1))
    truth = HyperParams((0.4,), 1.0, 0.1)
    C = covariance_matrix(X, X, truth, add_noise=True)
    ds = Dataset(X, np.linalg.cholesky(C) @ rng.standard_normal(30))
    base = truth.to_log()

    def f(t):
        lt = base.copy()
        lt[0] = t
        return nll(ds, HyperParams.from_log(lt))

    # bracket a minimum of a finite-difference derivative (independent of the
    # analytic gradient under test), then refine to a root
    h = 1e-5
    dfd = lambda u: (f(u + h) - f(u - h)) / (2 * h)
    grid = np.linspace(-4, 2, 61)
    vals = [dfd(u) for u in grid]
    k = next(i for i in range(60) if vals[i] < 0 < vals[i + 1])
    t = brentq(dfd, grid[k], grid[k + 1], xtol=1e-14)
    lt = base.copy()
    lt[0] = t
    assert abs(nll_grad(ds, lt)[0]) < 1e-6


# --- prediction --------------------------------------------------------------

def test_interpolation_without_noise():
    X = np.array([[0.2, 0.2], [1.0, 1.5], [1.7, 0.4]])
    y = np.array([0.3, -1.1, 0.8])
    h = HyperParams((0.3, 0.3), 1.0, 1e-12)
    p = full_gp_predict(Dataset(X, y), h, X[1])
    assert p.mean == pytest.approx(-1.1, abs=1e-6)


def test_prior_recovery_far_away():
    ds = random_dataset(np.random.default_rng(7), 10)
    p = full_gp_predict(ds, THETA, [60.0, 15.0])
    assert abs(p.mean) < 1e-6
    assert p.variance == pytest.approx(1.69, abs=1e-6)


def test_three_point_dense_oracle():
    X = np.array([[0.0, 0.0], [0.5, 0.2], [1.0, 0.9]])
    y = np.array([1.0, 0.2, -0.4])
    xs = np.array([0.4, 0.3])
    C = covariance_matrix(X, X, THETA, add_noise=True)
    k = covariance_matrix(X, xs[None], THETA)[:, 0]
    Ci = np.linalg.inv(C)
    p = full_gp_predict(Dataset(X, y), THETA, xs)
    assert p.mean == pytest.approx(k @ Ci @ y, rel=1e-10)
    assert p.variance == pytest.approx(1.69 - k @ Ci @ k, rel=1e-10)


def test_local_predict_equals_full_on_same_data():
    ds = random_dataset(np.random.default_rng(8), 25)
    xs = [0.7, 1.3]
    a = local_predict(ExpertModel.fit(ds, THETA), xs)
    b = full_gp_predict(ds, THETA, xs)
    assert a == b


def test_single_point_expert_scalar_oracle():
    x0, y0 = np.array([0.5, 0.5]), 0.9
    p = local_predict(ExpertModel.fit(Dataset([x0], [y0]), THETA), x0)
    assert p.mean == pytest.approx(1.69 * y0 / (1.69 + 0.01), rel=1e-12)


def test_distant_disjoint_experts_return_prior():
    rng = np.random.default_rng(9)
    e1 = ExpertModel.fit(random_dataset(rng, 5), THETA)
    e2 = ExpertModel.fit(Dataset(rng.uniform(0, 2, (5, 2)) + 1.0, rng.standard_normal(5)), THETA)
    for e in (e1, e2):
        p = local_predict(e, [80.0, -40.0])
        assert abs(p.mean) < 1e-9
        assert p.variance == pytest.approx(1.69, abs=1e-9)


def test_expert_cholesky_reconstructs_covariance():
    ds = random_dataset(np.random.default_rng(10), 20)
    e = ExpertModel.fit(ds, THETA)
    C = covariance_matrix(ds.inputs, ds.inputs, THETA, add_noise=True)
    assert np.linalg.norm(e.chol @ e.chol.T - C) / np.linalg.norm(C) < 1e-10
    assert np.all(np.diag(e.chol) > 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 20), st.integers(0, 10_000))
def test_prediction_variance_bounds(n, seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n)
    e = ExpertModel.fit(ds, THETA)
    _, var = e.predict_many(rng.uniform(-1, 3, (10, 2)))
    assert np.all(var >= 0)
    assert np.all(var <= 1.69 + 1e-12)
