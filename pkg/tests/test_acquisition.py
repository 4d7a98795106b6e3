import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from conftest import random_fixture
from contourgp.acquisition import (
    AcquisitionSpec,
    DomainSpec,
    Scorer,
    adaptive_gamma,
    csur,
    gamma_from_moments,
    genetic_maximize,
    icu,
    mcu,
    mee,
    misclassification_probability,
    optimize_acquisition,
    tmse,
)
from contourgp.gp_core import KernelParams, TrainingSet, build_gaussian_posterior
from contourgp.lookahead import lookahead_variance_self
from contourgp.robust_models import tp_posterior


class Fixed:
    """Surrogate stub returning prescribed mean/sd at every point."""

    def __init__(self, mean, sd):
        self.mean, self.sd = np.asarray(mean, float), np.asarray(sd, float)

    def predict(self, X):
        n = np.atleast_2d(X).shape[0]
        return np.broadcast_to(self.mean, n).copy(), np.broadcast_to(self.sd ** 2, n).copy()


def quad_fixture():
    """GP on a few noisy samples of the 1-D quadratic (root at 0.75)."""
    rng = np.random.default_rng(11)
    X = np.array([[0.05], [0.2], [0.4], [0.55], [0.9]])
    y = (X[:, 0] + 0.75) * (X[:, 0] - 0.75) + 0.05 * rng.standard_normal(5)
    return build_gaussian_posterior(KernelParams(0.6, (0.4,), 0.05), TrainingSet(X, y))


GRID = np.linspace(0, 1, 1001)[:, None]


def test_mcu_basics():
    assert mcu(Fixed(0.0, 0.3), [[0.5]], 2.0)[0] == pytest.approx(0.6)
    # straddle: 1.96 s - |m|
    assert mcu(Fixed(-0.2, 0.5), [[0.5]], 1.96)[0] == pytest.approx(1.96 * 0.5 - 0.2)
    a = mcu(Fixed(0.4, 0.2), [[0.0]], 1.5)[0]
    assert mcu(Fixed(1.2, 0.6), [[0.0]], 1.5)[0] == pytest.approx(3 * a)


def test_adaptive_gamma():
    m = np.linspace(0, 1, 1001)
    assert gamma_from_moments(m, np.full_like(m, 0.1)) == pytest.approx(0.5 / 0.3, rel=1e-3)
    assert gamma_from_moments(m, np.full_like(m, 0.2)) == pytest.approx(0.5 / 0.6, rel=1e-3)
    assert gamma_from_moments(np.zeros(200), np.ones(200)) == 0.1
    with pytest.raises(ZeroDivisionError):
        gamma_from_moments(m, np.zeros_like(m))
    post = quad_fixture()
    g = adaptive_gamma(post, GRID)
    mu, v = post.predict(GRID)
    assert g == pytest.approx(max((np.percentile(mu, 75) - np.percentile(mu, 25)) / (3 * np.sqrt(v).mean()), 0.1))


def test_mee_values():
    assert mee(Fixed(0.0, 0.3), [[0.1]])[0] == 0.5
    assert mee(Fixed(1.96, 1.0), [[0.1]])[0] == pytest.approx(0.024997895, abs=1e-8)
    assert misclassification_probability(0.0, 0.0) == 0.5
    assert misclassification_probability(0.1, 0.0) == 0.0
    post = quad_fixture()
    s = mee(post, GRID)
    assert np.all((s > 0) & (s <= 0.5))


def test_tp_uses_student_t():
    tp = tp_posterior(quad_fixture().data, KernelParams(0.6, (0.4,), 0.05, nu=3.0))
    m, v = tp.predict(GRID[::50])
    expect = stats.t.sf(np.abs(m) / np.sqrt(v), tp.dof)
    assert np.allclose(mee(tp, GRID[::50]), expect)
    # tMSE keeps the Gaussian weight
    s = np.sqrt(v)
    assert np.allclose(tmse(tp, GRID[::50]), s * stats.norm.pdf(m / s))


def test_csur_zero_on_contour():
    post = quad_fixture()
    # a point where the posterior mean is exactly zero
    from scipy.optimize import brentq

    x0 = brentq(lambda x: post.predict([[x]])[0][0], 0.5, 0.95, xtol=1e-15)
    assert abs(post.predict([[x0]])[0][0]) < 1e-12
    assert csur(post, [[x0]])[0] <= 1e-12


def test_csur_no_information_gain():
    post = quad_fixture()
    x = np.array([[0.3]])
    m, v = post.predict(x)
    # infinite look-ahead noise: s_next = s
    s_next = np.sqrt(lookahead_variance_self(post, x, noise=1e30))
    assert s_next[0] == pytest.approx(np.sqrt(v[0]))


def test_csur_argmax_off_contour():
    post = quad_fixture()
    score = csur(post, GRID)
    m, v = post.predict(GRID)
    i = int(np.argmax(score))
    # the maximiser is not on the estimated contour
    assert abs(m[i]) > 0.05 * np.sqrt(v[i])
    assert score[i] > 0


@given(st.integers(0, 10_000))
def test_csur_nonnegative(seed):
    p, data, Xs = random_fixture(seed, n=8)
    post = build_gaussian_posterior(p, data)
    assert np.all(csur(post, np.vstack([Xs, data.X])) >= 0)


def test_icu_far_candidate_no_improvement():
    post = quad_fixture()
    grid = GRID[::10]
    m, v = post.predict(grid)
    now = np.mean(misclassification_probability(m, np.sqrt(v)))
    assert icu(post, [[40.0]], grid)[0] == pytest.approx(-now, abs=1e-12)


def test_icu_single_point_grid():
    post = quad_fixture()
    xm = np.array([[0.7]])
    x = np.array([[0.65]])
    m, _ = post.predict(xm)
    from contourgp.lookahead import lookahead_variance

    s_next = np.sqrt(lookahead_variance(post, x, xm)[0, 0])
    assert icu(post, x, xm)[0] == pytest.approx(-misclassification_probability(m[0], s_next), abs=1e-12)


def test_icu_prefers_uncertain_contour_point():
    post = quad_fixture()
    grid = GRID[::10]
    far_from_contour = icu(post, [[0.2]], grid)[0]
    near_contour = icu(post, [[0.75]], grid)[0]
    assert near_contour > far_from_contour


def test_icu_measure_moves_argmax():
    # two crossings, at 0.25 and 0.75
    X = np.linspace(0.05, 0.95, 7)[:, None]
    y = 4 * (X[:, 0] - 0.25) * (X[:, 0] - 0.75)
    post = build_gaussian_posterior(KernelParams(0.5, (0.3,), 0.05), TrainingSet(X, y))
    grid = GRID[::5]
    lognormal = stats.lognorm(s=0.3, scale=0.25).pdf(grid[:, 0])
    Xc = GRID[::4]
    uniform_best = Xc[np.argmax(icu(post, Xc, grid))][0]
    weighted_best = Xc[np.argmax(icu(post, Xc, grid, lognormal))][0]
    assert abs(weighted_best - 0.25) < 0.15
    assert uniform_best != weighted_best


def test_tmse_values():
    assert tmse(Fixed(0.0, 0.4), [[0.0]])[0] == pytest.approx(0.4 / np.sqrt(2 * np.pi))
    assert tmse(Fixed(10.0, 0.1), [[0.0]])[0] < 1e-20
    assert tmse(Fixed(0.0, 0.0), [[0.0]])[0] == 0.0
    assert tmse(Fixed(0.0, 0.5), [[0.0]])[0] > tmse(Fixed(0.0, 0.2), [[0.0]])[0]


def test_scores_invariant_to_data_order():
    post = quad_fixture()
    perm = np.array([3, 0, 4, 1, 2])
    d = post.data
    shuffled = build_gaussian_posterior(post.params, TrainingSet(d.X[perm], d.y[perm]))
    for fn in (mee, tmse):
        assert np.allclose(fn(post, GRID[::20]), fn(shuffled, GRID[::20]), atol=1e-12)


def test_spec_validation():
    with pytest.raises(ValueError):
        AcquisitionSpec("ucb")
    with pytest.raises(ValueError):
        AcquisitionSpec("mcu", gamma=-1.0)
    with pytest.raises(ValueError):
        AcquisitionSpec("icu")
    spec = AcquisitionSpec("icu", icu_grid=GRID[:4], icu_weights=[1, 1, 2, 0])
    assert spec.icu_weights.sum() == pytest.approx(1.0)


def test_scorer_icu_is_reduction():
    post = quad_fixture()
    grid = GRID[::10]
    sc = Scorer(AcquisitionSpec("icu", icu_grid=grid), post)
    Xc = GRID[::50]
    raw = icu(post, Xc, grid)
    assert np.allclose(sc(Xc) - raw, sc.shift)
    assert np.all(sc(Xc) >= -1e-12)


def test_genetic_unimodal():
    dom = DomainSpec((0.0,), (1.0,))
    res = genetic_maximize(lambda X: -(X[:, 0] - 0.3137) ** 2, dom, 0)
    assert abs(res.x[0] - 0.3137) < 1e-2
    assert res.score >= res.reference_best - 1e-6


def test_genetic_respects_constraint():
    dom = DomainSpec((25.0, 25.0), (55.0, 55.0), A=((1.0, 1.0),), b=(80.0,))
    res = genetic_maximize(lambda X: X.sum(axis=1), dom, 3)
    assert res.x.sum() <= 80.0
    assert res.x.sum() > 79.0


def test_genetic_deterministic():
    dom = DomainSpec((0.0, 0.0), (1.0, 1.0))
    f = lambda X: np.sin(7 * X[:, 0]) * np.cos(5 * X[:, 1])
    a, b = genetic_maximize(f, dom, 42), genetic_maximize(f, dom, 42)
    assert np.array_equal(a.x, b.x)


def test_optimize_acquisition_tmse():
    post = quad_fixture()
    dom = DomainSpec((0.0,), (1.0,))
    x = optimize_acquisition(AcquisitionSpec("tmse"), post, dom, rng=0)
    best_grid = tmse(post, GRID).max()
    assert tmse(post, x[None])[0] >= best_grid - 1e-4


def test_optimize_with_measure():
    post = quad_fixture()
    dom = DomainSpec((0.0,), (1.0,))
    spec = AcquisitionSpec("mcu", gamma=1.96, measure=lambda X: np.exp(-50 * (X[:, 0] - 0.2) ** 2))
    x = optimize_acquisition(spec, post, dom, rng=0)
    assert abs(x[0] - 0.2) < 0.25


def test_domain_infeasible():
    dom = DomainSpec((0.0, 0.0), (1.0, 1.0), A=((1.0, 1.0),), b=(-1.0,))
    with pytest.raises(ValueError):
        dom.sobol(16, seed=0)
