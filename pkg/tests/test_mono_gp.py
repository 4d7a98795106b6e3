import numpy as np
import pytest

from contourgp.gp_core import KernelParams, TrainingSet, build_gaussian_posterior
from contourgp.lookahead import lookahead_variance
from contourgp.mono_gp import (
    VirtualDerivObs,
    ep_fit_monotone,
    fit_monotone_adaptive,
    joint_kernel,
    lookahead_var_monotone,
    place_virtual_points,
    predict_monotone,
)
from contourgp.robust_models import clgp_posterior, signed_responses

P = KernelParams(1.2, (0.4, 0.7), 0.1)


def _virtual(n, seed=0, d=2, coord=0, eta=1e-3):
    rng = np.random.default_rng(seed)
    return [VirtualDerivObs(x, coord, 1, eta) for x in rng.random((n, d))]


def test_virtual_validation():
    with pytest.raises(ValueError):
        VirtualDerivObs((0.1, 0.2), 0, direction=0)
    with pytest.raises(ValueError):
        VirtualDerivObs((0.1, 0.2), 2)
    with pytest.raises(ValueError):
        VirtualDerivObs((0.1,), 0, eta=0.0)


def test_joint_kernel_blocks():
    X = np.array([[0.3, 0.6]])
    K = joint_kernel(X, X, np.array([0]), P)
    assert K[0, 1] == pytest.approx(0.0, abs=1e-14)
    assert K[1, 1] == pytest.approx(P.sigma_se ** 2 / P.theta[0] ** 2)


def test_joint_kernel_matches_finite_differences():
    rng = np.random.default_rng(1)
    x, xv = rng.random(2), rng.random(2)
    from contourgp.gp_core import se_kernel

    h = 1e-5
    e = np.array([0.0, h])
    fd = (se_kernel(x, xv + e, P) - se_kernel(x, xv - e, P)) / (2 * h)
    K = joint_kernel(x[None], xv[None], np.array([1]), P)
    assert K[0, 1] == pytest.approx(fd, abs=1e-8)


def test_joint_kernel_psd():
    rng = np.random.default_rng(2)
    X, Xv = rng.random((5, 2)), rng.random((5, 2))
    K = joint_kernel(X, Xv, np.array([0, 1, 0, 1, 0]), P)
    assert np.allclose(K, K.T)
    assert np.linalg.eigvalsh(K).min() >= -1e-8


def _increasing_data(n=12, seed=3):
    rng = np.random.default_rng(seed)
    X = rng.random((n, 2))
    return TrainingSet(X, 2 * X[:, 0] - 1 + 0.05 * rng.standard_normal(n))


def test_empty_constraint_reduction():
    data = _increasing_data()
    Xs = np.random.default_rng(4).random((30, 2))
    _, mono = ep_fit_monotone(data, [], P)
    gm, gc = build_gaussian_posterior(P, data).predict_cov(Xs)
    mm, mc = predict_monotone(mono, Xs)
    assert np.max(np.abs(mm - gm)) < 1e-10
    assert np.max(np.abs(mc - gc)) < 1e-10


def test_empty_constraint_classification():
    data = _increasing_data()
    signed = TrainingSet(data.X, signed_responses(data.y))
    p = P.with_(tau=0.0)
    _, mono = ep_fit_monotone(data, [], p, classification=True)
    cl = clgp_posterior(signed, p)
    Xs = np.random.default_rng(5).random((10, 2))
    # EP and Laplace differ for probit sites; they agree in sign and roughly in size
    assert np.all(np.sign(mono.predict(Xs)[0]) == np.sign(cl.predict(Xs)[0]))


def test_consistent_constraints_respected():
    data = _increasing_data()
    virtual = _virtual(15, eta=1e-3)
    sites, mono = ep_fit_monotone(data, virtual, P)
    assert sites.converged
    assert np.all(sites.sigma2_tilde[data.n :] > 0)
    g, _ = mono.predict_derivative(np.array([v.location for v in virtual]), 0)
    assert np.all(g >= -0.1 / 1e-3)
    assert np.all(g > 0)


def test_contradicting_data_pulled_toward_flat():
    rng = np.random.default_rng(6)
    X = rng.random((12, 2))
    data = TrainingSet(X, -3 * X[:, 0] + 0.05 * rng.standard_normal(12))
    virtual = _virtual(20, seed=7, eta=1e-3)
    V = np.array([v.location for v in virtual])
    _, free = ep_fit_monotone(data, [], P)
    _, mono = ep_fit_monotone(data, virtual, P)
    g_free, _ = free.predict_derivative(V, 0)
    g_mono, _ = mono.predict_derivative(V, 0)
    assert np.mean(np.abs(g_mono)) < np.mean(np.abs(g_free))


def test_prior_reversion():
    _, mono = ep_fit_monotone(_increasing_data(), _virtual(5), P)
    m, v = mono.predict(np.array([[40.0, 40.0]]))
    assert abs(m[0]) < 1e-10 and v[0] == pytest.approx(P.sigma_se ** 2)


def test_loose_constraint_matches_gp():
    data = _increasing_data()
    Xs = np.random.default_rng(8).random((20, 2))
    _, mono = ep_fit_monotone(data, _virtual(10, eta=1e6), P)
    gm, gv = build_gaussian_posterior(P, data).predict(Xs)
    mm, mv = mono.predict(Xs)
    assert np.max(np.abs(mm - gm)) < 1e-3
    assert np.max(np.abs(mv - gv)) < 1e-3


def test_constraints_reduce_variance_1d():
    p = KernelParams(1.0, (0.5,), 0.1)
    X = np.array([[0.1], [0.5], [0.9]])
    data = TrainingSet(X, [-0.8, 0.0, 0.8])
    virtual = [VirtualDerivObs((x,), 0, 1, 1e-3) for x in np.linspace(0, 1, 8)]
    Xs = np.linspace(0, 1, 25)[:, None]
    _, mono = ep_fit_monotone(data, virtual, p)
    gv = build_gaussian_posterior(p, data).predict(Xs)[1]
    assert np.all(mono.predict(Xs)[1] <= gv + 1e-8)


def test_place_virtual_points_rules():
    data = _increasing_data()
    _, mono = ep_fit_monotone(data, [], P)
    dom = ((0.0, 0.0), (1.0, 1.0))
    assert place_virtual_points(mono, dom, 0, (1, 0)) == []
    first = place_virtual_points(mono, dom, 6, (1, 0))
    assert len(first) == 6 and all(v.coordinate == 0 for v in first)
    _, mono2 = ep_fit_monotone(data, first, P)
    second = place_virtual_points(mono2, dom, 6, (1, 0))
    keys = [v.key for v in first + second]
    assert len(set(keys)) == len(keys)


def test_place_virtual_points_on_monotone_surface():
    # well-determined increasing fit: violation probabilities are largest where
    # the derivative is least certain, away from the data
    X = np.array([[0.45, 0.5], [0.5, 0.5], [0.55, 0.5]])
    data = TrainingSet(X, [-0.1, 0.0, 0.1])
    _, mono = ep_fit_monotone(data, [], P)
    pts = place_virtual_points(mono, ((0.0, 0.0), (1.0, 1.0)), 5, (1, 0))
    locs = np.array([v.location for v in pts])
    assert np.min(np.linalg.norm(locs - [0.5, 0.5], axis=1)) > 0.2


def test_adaptive_fit_budget():
    data = _increasing_data()
    mono = fit_monotone_adaptive(data, P, (1, 0), ((0.0, 0.0), (1.0, 1.0)), budget=8)
    assert len(mono.virtual) <= 8
    assert all(v.coordinate == 0 and v.direction == 1 for v in mono.virtual)


def test_lookahead_monotone():
    data = _increasing_data()
    _, mono = ep_fit_monotone(data, _virtual(6), P)
    x = np.array([[0.3, 0.4]])
    s2 = mono.predict(x)[1][0]
    tau2 = P.tau ** 2
    assert lookahead_var_monotone(mono, x, x)[0] == pytest.approx(s2 * tau2 / (tau2 + s2), rel=1e-8)
    Xs = np.random.default_rng(9).random((15, 2))
    la = lookahead_var_monotone(mono, x, Xs)
    assert np.all(la <= mono.predict(Xs)[1] + 1e-12)
    far = lookahead_var_monotone(mono, x, np.array([[30.0, 30.0]]))
    assert far[0] == pytest.approx(mono.predict(np.array([[30.0, 30.0]]))[1][0])
    assert np.allclose(la, lookahead_variance(mono, x, Xs)[0])
