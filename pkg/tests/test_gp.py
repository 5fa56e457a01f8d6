import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from qimarl import ConfigError
from qimarl.gp import (GpNumericalError, KernelSpec, NearestSampleModel, SampleMemory, fit,
                       kernel_eval, kernel_matrix, predict, softmax_selection_gradient,
                       softmax_selection_probs, ucb)


def dense_oracle(spec, x, y, q):
    """Posterior by explicit inverse, no factorization."""
    k = kernel_matrix(spec, x, x) + spec.noise_variance * np.eye(len(x))
    inv = np.linalg.inv(k)
    ks = kernel_matrix(spec, x, q)
    mean = ks.T @ inv @ y
    var = np.diag(kernel_matrix(spec, q, q)) - np.einsum("ij,ik,kj->j", ks, inv, ks)
    return mean, np.maximum(var, 0.0)


def matern_bessel(r, nu, ell, var):
    r = np.asarray(r, dtype=float)
    a = np.sqrt(2 * nu) * r / ell
    with np.errstate(invalid="ignore"):
        out = var * 2 ** (1 - nu) / gamma_fn(nu) * a**nu * kv(nu, a)
    return np.where(r == 0, var, out)


def random_instance(rng, m, spatial="rbf", nu=1.5):
    spec = KernelSpec(spatial=spatial, nu=nu, length_scale=rng.uniform(1.0, 4.0),
                      variance=rng.uniform(0.5, 2.0), noise_variance=rng.uniform(1e-3, 1e-1))
    x = np.column_stack([rng.uniform(0, 16, m), rng.uniform(0, 16, m), np.zeros(m)])
    y = rng.normal(size=m)
    return spec, x, y


def test_rbf_self_covariance_is_variance():
    assert kernel_eval(KernelSpec(variance=1.0), (3, 4, 0), (3, 4, 0)) == 1.0


def test_rbf_at_one_length_scale():
    spec = KernelSpec(length_scale=2.5)
    np.testing.assert_allclose(kernel_eval(spec, (0, 0, 0), (2.5, 0, 0)), math.exp(-0.5), rtol=1e-15)
    np.testing.assert_allclose(math.exp(-0.5), 0.6065, atol=1e-4)


@pytest.mark.parametrize("nu", [0.5, 1.5, 2.5])
def test_matern_closed_forms_match_bessel_form(nu):
    spec = KernelSpec(spatial="matern", nu=nu, length_scale=1.7, variance=1.3)
    r = np.linspace(0, 12, 121)
    pts = np.column_stack([r, np.zeros_like(r), np.zeros_like(r)])
    got = kernel_matrix(spec, [[0, 0, 0]], pts)[0]
    np.testing.assert_allclose(got, matern_bessel(r, nu, 1.7, 1.3), rtol=1e-10, atol=1e-14)


def test_matern_half_is_exponential():
    spec = KernelSpec(spatial="matern", nu=0.5, length_scale=2.0, variance=1.5)
    r = np.linspace(0, 10, 50)
    got = kernel_matrix(spec, np.zeros((1, 3)), np.column_stack([r, 0 * r, 0 * r]))[0]
    np.testing.assert_allclose(got, 1.5 * np.exp(-r / 2.0), rtol=1e-14)


def test_temporal_kernels_multiply():
    se = KernelSpec(temporal="se", temporal_length_scale=3.0)
    per = KernelSpec(temporal="periodic", temporal_length_scale=1.0, period=24.0)
    s, s2 = (1.0, 2.0, 0.0), (2.0, 2.0, 5.0)
    sp = math.exp(-0.5 * (1 / 2.5) ** 2)
    assert kernel_eval(se, s, s2) == pytest.approx(sp * math.exp(-0.5 * (5 / 3) ** 2), rel=1e-14)
    assert kernel_eval(per, s, s2) == pytest.approx(
        sp * math.exp(-2 * math.sin(math.pi * 5 / 24) ** 2), rel=1e-14)
    # one full period apart is indistinguishable in time
    assert kernel_eval(per, s, (1.0, 2.0, 24.0)) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("bad", [dict(length_scale=0), dict(variance=-1), dict(nu=0.7, spatial="matern"),
                                 dict(noise_variance=-1e-3), dict(spatial="cubic")])
def test_invalid_kernel_rejected(bad):
    with pytest.raises(ConfigError):
        KernelSpec(**bad)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["rbf", "matern"]), st.integers(1, 30))
def test_kernel_matrix_symmetric_psd(seed, spatial, m):
    rng = np.random.default_rng(seed)
    spec, x, _ = random_instance(rng, m, spatial)
    x[:, 2] = rng.uniform(0, 10, m)
    spec = KernelSpec(spatial=spatial, temporal="se", length_scale=spec.length_scale)
    k = kernel_matrix(spec, x, x)
    np.testing.assert_array_equal(k, k.T)
    assert np.linalg.eigvalsh(k).min() >= -1e-10 * np.trace(k)


def test_empty_model_is_prior():
    model = fit(KernelSpec(variance=1.7), np.zeros((0, 3)), [])
    mean, var = predict(model, [[1, 2, 0], [5, 5, 3]])
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_array_equal(var, 1.7)


def test_single_point_posterior_mean_closed_form():
    spec = KernelSpec(variance=1.0, noise_variance=1e-3)
    model = fit(spec, [[4, 4, 0]], [2.5])
    mean, _ = predict(model, [[4, 4, 0]])
    np.testing.assert_allclose(mean[0], 2.5 / (1 + 1e-3), rtol=1e-14)


def test_noiseless_interpolation():
    model = fit(KernelSpec(noise_variance=0.0), [[3, 1, 0]], [0.8])
    mean, var = predict(model, [[3, 1, 0]])
    assert mean[0] == 0.8
    assert abs(var[0]) < 1e-10


def test_far_query_reverts_to_prior():
    spec = KernelSpec(variance=1.3)
    model = fit(spec, [[0, 0, 0], [1, 0, 0]], [5.0, -2.0])
    mean, var = predict(model, [[1e4, 1e4, 0]])
    assert abs(mean[0]) < 1e-12
    assert var[0] == pytest.approx(1.3)


def test_duplicate_inputs_without_noise_name_the_pair():
    x = [[0, 0, 0], [5, 5, 0], [0, 0, 0]]
    with pytest.raises(GpNumericalError) as exc:
        fit(KernelSpec(noise_variance=0.0), x, [1.0, 2.0, 3.0])
    assert exc.value.pair == (0, 2)


def test_cholesky_reconstructs_kernel():
    rng = np.random.default_rng(3)
    spec, x, y = random_instance(rng, 80)
    model = fit(spec, x, y)
    k = kernel_matrix(spec, x, x) + spec.noise_variance * np.eye(len(x))
    err = np.linalg.norm(model.chol @ model.chol.T - k) / np.linalg.norm(k)
    assert err < 1e-8


@pytest.mark.parametrize("spatial", ["rbf", "matern"])
def test_predict_matches_dense_inverse_oracle(spatial):
    rng = np.random.default_rng(11)
    for m in (1, 7, 60, 200):
        spec, x, y = random_instance(rng, m, spatial)
        q = np.column_stack([rng.uniform(-2, 18, 200), rng.uniform(-2, 18, 200), np.zeros(200)])
        mean, var = predict(fit(spec, x, y), q)
        om, ov = dense_oracle(spec, x, y, q)
        np.testing.assert_allclose(mean, om, atol=1e-8)
        np.testing.assert_allclose(var, ov, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 25))
def test_variance_bounded_and_monotone_in_data(seed, m):
    rng = np.random.default_rng(seed)
    spec, x, y = random_instance(rng, m + 1)
    q = np.column_stack([rng.uniform(0, 16, 40), rng.uniform(0, 16, 40), np.zeros(40)])
    _, v_small = predict(fit(spec, x[:m], y[:m]), q)
    _, v_big = predict(fit(spec, x, y), q)
    assert np.all(v_small <= spec.variance + 1e-10)
    assert np.all(v_big <= v_small + 1e-10)


def test_ucb_arithmetic_and_kappa_zero():
    class Fixed:
        def predict(self, pts):
            return np.array([1.0, 0.2]), np.array([0.25, 4.0])

    np.testing.assert_allclose(ucb(Fixed(), None, 2.0), [2.0, 4.2])
    np.testing.assert_array_equal(ucb(Fixed(), None, 0.0), [1.0, 0.2])
    with pytest.raises(ValueError):
        ucb(Fixed(), None, -1.0)


def test_ucb_argmax_moves_toward_uncertainty():
    # a few samples on the left half: right half has the high sigma
    rng = np.random.default_rng(5)
    x = np.column_stack([rng.uniform(0, 6, 15), rng.uniform(0, 15, 15), np.zeros(15)])
    y = 1.0 + 0.1 * rng.normal(size=15)
    model = fit(KernelSpec(), x, y)
    gx, gy = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    cells = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(256)])
    mean, var = model.predict(cells)
    sigmas = []
    for kappa in (0.5, 1.0, 2.0):
        scores = ucb(model, cells, kappa)
        best = max(range(256), key=lambda i: mean[i] + kappa * math.sqrt(var[i]))
        assert scores[best] == scores.max()
        sigmas.append(math.sqrt(var[best]))
    assert sigmas[0] <= sigmas[1] <= sigmas[2]


class _Stub:
    def __init__(self, mu, sigma):
        self.mu, self.sigma = np.asarray(mu, float), np.asarray(sigma, float)

    def predict(self, pts):
        return self.mu, self.sigma**2


def test_selection_gradient_symmetric_case():
    g = softmax_selection_gradient(_Stub([0.1, 0.4, 0.3], [0.5, 0.5, 0.5]), None, 1.0, 0.3)
    np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_selection_gradient_two_points():
    g = softmax_selection_gradient(_Stub([0.0, 0.0], [1.0, 0.0]), None, 0.0, 1.0)
    np.testing.assert_allclose(g, [0.5, -0.5], rtol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 3.0), st.floats(0.05, 2.0))
def test_selection_gradient_matches_finite_difference(seed, kappa, tau):
    rng = np.random.default_rng(seed)
    stub = _Stub(rng.normal(size=12), rng.uniform(0.05, 1.5, 12))
    g = softmax_selection_gradient(stub, None, kappa, tau)
    h = 1e-6
    fd = (np.log(softmax_selection_probs(stub, None, kappa + h, tau))
          - np.log(softmax_selection_probs(stub, None, max(kappa - h, 0.0), tau))) / (
        kappa + h - max(kappa - h, 0.0))
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-5)
    p = softmax_selection_probs(stub, None, kappa, tau)
    assert abs(p @ g) < 1e-10


def test_nearest_sample_model():
    spec = KernelSpec(variance=1.0)
    m = NearestSampleModel(spec, [[0, 0, 0], [5, 5, 1], [0, 0, 2]], [1.0, 2.0, 3.0])
    mean, var = m.predict([[0, 0, 0], [1, 0, 0], [5, 5, 0], [4, 4, 0]])
    np.testing.assert_array_equal(mean, [3.0, 3.0, 2.0, 2.0])
    np.testing.assert_array_equal(var, [0.0, 1.0, 0.0, 1.0])


def test_sample_memory_fifo():
    mem = SampleMemory(capacity=3)
    for k in range(5):
        mem.add(k, k, 0, float(k))
    x, y = mem.arrays()
    np.testing.assert_array_equal(y, [2.0, 3.0, 4.0])
    assert mem.fit(KernelSpec()).n_train == 3
    assert isinstance(mem.fit(KernelSpec(), use_gp=False), NearestSampleModel)
