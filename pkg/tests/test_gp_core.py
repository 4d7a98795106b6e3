import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from conftest import random_fixture
from contourgp.gp_core import (
    KernelParams,
    TrainingSet,
    build_gaussian_posterior,
    fit_gaussian_gp,
    kernel_matrix,
    log_marginal_likelihood,
    predict_gaussian,
    se_kernel,
    update_gaussian,
)

P1 = KernelParams(1.0, (1.0,), 1.0)


def test_se_kernel_values():
    assert se_kernel([0.3, 0.7], [0.3, 0.7], KernelParams(2.0, (0.5, 1.0), 0.1)) == pytest.approx(4.0)
    assert se_kernel([0.0], [1.0], P1) == pytest.approx(0.6065306597126334, abs=1e-12)
    p = KernelParams(1.3, (0.4, 0.9), 0.0)
    assert se_kernel([0.1, 0.2], [0.5, 0.9], p) == se_kernel([0.5, 0.9], [0.1, 0.2], p)


def test_se_kernel_dimension_mismatch():
    with pytest.raises(ValueError):
        se_kernel([0.0, 1.0], [0.0, 1.0], P1)


def test_params_validation():
    with pytest.raises(ValueError):
        KernelParams(0.0, (1.0,), 0.1)
    with pytest.raises(ValueError):
        KernelParams(1.0, (1.0,), -0.1)
    with pytest.raises(ValueError):
        KernelParams(1.0, (1.0,), 0.1, nu=2.0)


def test_kernel_matrix_basic():
    p = KernelParams(1.5, (0.5,), 0.0)
    assert np.allclose(kernel_matrix(np.array([[0.2]]), p), [[2.25]])
    K = kernel_matrix(np.array([[0.2], [0.2]]), p)
    assert np.allclose(K, 2.25)
    assert np.linalg.matrix_rank(K) == 1
    X = np.random.default_rng(1).random((5, 3))
    K = kernel_matrix(X, KernelParams(1.0, (0.3, 0.5, 0.8), 0.0))
    assert np.allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() >= -1e-10


def test_lml_scalar_oracle():
    data = TrainingSet(np.array([[0.0]]), np.array([0.0]))
    assert log_marginal_likelihood(P1, data) == pytest.approx(-1.2655121234846454, abs=1e-6)


def test_lml_dense_oracle_and_permutation(fixture2d):
    p, data, _ = fixture2d
    A = kernel_matrix(data.X, p) + p.tau ** 2 * np.eye(data.n)
    dense = stats.multivariate_normal(np.zeros(data.n), A).logpdf(data.y)
    # the stored factor carries 1e-8 sigma^2 of jitter; the dense oracle does not
    assert log_marginal_likelihood(p, data) == pytest.approx(dense, abs=1e-4)
    perm = np.random.default_rng(3).permutation(data.n)
    shuffled = TrainingSet(data.X[perm], data.y[perm])
    assert log_marginal_likelihood(p, shuffled) == pytest.approx(log_marginal_likelihood(p, data), abs=1e-9)


def test_posterior_caches(fixture2d):
    p, data, _ = fixture2d
    post = build_gaussian_posterior(p, data)
    A = post.system_matrix()
    # the jitter is the only difference
    rel = np.abs(post.chol @ post.chol.T - A).max() / np.abs(A).max()
    assert rel < 1e-7
    assert np.abs((A + post.jitter * p.sigma_se ** 2 * np.eye(data.n)) @ post.alpha - data.y).max() < 1e-8


def test_predict_closed_form():
    post = build_gaussian_posterior(P1, TrainingSet([[0.0]], [1.0]))
    mean, cov = predict_gaussian(post, np.array([[0.0]]))
    assert mean[0] == pytest.approx(0.5, abs=1e-7)
    assert cov[0, 0] == pytest.approx(0.5, abs=1e-7)


def test_prior_reversion_and_duplicates(fixture2d):
    p, data, _ = fixture2d
    post = build_gaussian_posterior(p, data)
    m, v = post.predict(np.array([[60.0, -40.0]]))
    assert abs(m[0]) < 1e-10 and v[0] == pytest.approx(p.sigma_se ** 2)
    mean, cov = predict_gaussian(post, np.array([[0.4, 0.4], [0.4, 0.4]]))
    assert mean[0] == mean[1]
    assert np.allclose(cov, cov[0, 0])


def test_update_matches_refit():
    worst = 0.0
    for seed in range(20):
        p, data, Xs = random_fixture(seed)
        x_new = np.random.default_rng(100 + seed).random((1, 2))
        upd = update_gaussian(build_gaussian_posterior(p, data), x_new, 0.3)
        ref = build_gaussian_posterior(p, data.append(x_new, 0.3))
        for a, b in zip(upd.predict(Xs), ref.predict(Xs)):
            worst = max(worst, np.abs(a - b).max())
    assert worst < 1e-8


def test_update_duplicate_shrinks_variance(fixture2d):
    p, data, _ = fixture2d
    post = build_gaussian_posterior(p, data)
    x = data.X[:1]
    before = post.predict(x)[1][0]
    after = update_gaussian(post, x, data.y[0]).predict(x)[1][0]
    assert after < before


def test_sequential_updates_match_batch():
    p, data, Xs = random_fixture(7, n=5)
    rng = np.random.default_rng(8)
    Xn, yn = rng.random((10, 2)), rng.standard_normal(10)
    post = build_gaussian_posterior(p, data)
    for x, y in zip(Xn, yn):
        post = update_gaussian(post, x, y)
    batch = build_gaussian_posterior(p, TrainingSet(np.vstack([data.X, Xn]), np.r_[data.y, yn]))
    assert np.abs(post.predict(Xs)[0] - batch.predict(Xs)[0]).max() < 1e-6
    assert np.abs(post.predict(Xs)[1] - batch.predict(Xs)[1]).max() < 1e-6


def test_fit_recovers_lengthscale():
    rng = np.random.default_rng(2018)
    truth = KernelParams(1.0, (0.5,), 0.1)
    X = rng.random((200, 1))
    K = kernel_matrix(X, truth) + 1e-10 * np.eye(200)
    y = np.linalg.cholesky(K) @ rng.standard_normal(200) + 0.1 * rng.standard_normal(200)
    post = fit_gaussian_gp(TrainingSet(X, y), restarts=5, rng=1)
    assert 0.25 <= post.params.theta[0] <= 0.75


def test_more_restarts_not_worse(fixture2d):
    _, data, _ = fixture2d
    l1 = log_marginal_likelihood(fit_gaussian_gp(data, restarts=1, rng=0).params, data)
    l5 = log_marginal_likelihood(fit_gaussian_gp(data, restarts=5, rng=0).params, data)
    assert l5 >= l1 - 1e-6


def test_fit_duplicate_inputs():
    data = TrainingSet(np.array([[0.5], [0.5]]), np.array([0.1, 0.2]))
    post = fit_gaussian_gp(data, restarts=2, rng=0)
    assert np.all(np.isfinite(post.predict(np.array([[0.2]]))[0]))


def test_fit_needs_two_points():
    with pytest.raises(ValueError):
        fit_gaussian_gp(TrainingSet([[0.5]], [1.0]))


def test_interpolation_at_zero_noise():
    X = np.linspace(0, 1, 6)[:, None]
    y = np.cos(4 * X[:, 0])
    post = build_gaussian_posterior(KernelParams(1.0, (0.3,), 0.0), TrainingSet(X, y))
    assert np.abs(post.predict(X)[0] - y).max() < 1e-6


def test_replication_folds_noise():
    X = np.array([[0.2], [0.8]])
    p = KernelParams(1.0, (0.5,), 0.4)
    batched = build_gaussian_posterior(p, TrainingSet(X, [0.3, -0.1], reps=[4, 4]))
    direct = build_gaussian_posterior(p.with_(tau=0.2), TrainingSet(X, [0.3, -0.1]))
    assert np.allclose(batched.predict(X)[1], direct.predict(X)[1])


@given(st.integers(0, 10_000))
def test_variance_bounds(seed):
    p, data, Xs = random_fixture(seed, n=8)
    post = build_gaussian_posterior(p, data)
    _, v = post.predict(Xs)
    assert np.all(v >= 0) and np.all(v <= p.sigma_se ** 2 + 1e-10)
    x_new = np.random.default_rng(seed + 1).random((1, 2))
    _, v2 = update_gaussian(post, x_new, 0.0).predict(Xs)
    assert np.all(v2 <= v + 1e-10)
