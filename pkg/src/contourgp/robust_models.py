"""Non-Gaussian surrogates: Student-t observation GP and probit classification
GP (both via Laplace), and the Student-t process."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg, special, stats

from .gp_core import (
    LOG_2PI,
    FitError,
    GaussianPosterior,
    KernelParams,
    LinearGaussianPosterior,
    ParamBounds,
    TrainingSet,
    build_gaussian_posterior,
    default_bounds,
    fit_gaussian_gp,
    kernel_matrix,
    multistart_minimize,
    random_starts,
    stable_cholesky,
)

logger = logging.getLogger(__name__)

W_FLOOR = 1e-6
NEWTON_MAXIT = 100
NEWTON_TOL = 1e-6


@dataclass
class LaplaceState:
    """Mode of a Laplace approximation and the likelihood curvature there."""

    mode: np.ndarray
    hess_diag: np.ndarray
    a: np.ndarray  # K^{-1} mode
    converged: bool
    iterations: int
    grad_norm: float
    log_evidence: float


# ---------------------------------------------------------------- likelihoods

def tgp_log_likelihood(f, data: TrainingSet, params: KernelParams) -> float:
    """Sum of Student-t log densities of ``y - f`` with scale ``tau``, ``nu`` dof."""
    return float(_t_terms(np.asarray(f, float), data.y, params.tau, params.nu)[0])


def _t_terms(f, y, tau, nu):
    r = y - f
    s = nu * tau ** 2
    lp = (
        special.gammaln((nu + 1) / 2) - special.gammaln(nu / 2)
        - 0.5 * np.log(nu * np.pi) - np.log(tau)
        - 0.5 * (nu + 1) * np.log1p(r ** 2 / s)
    )
    grad = (nu + 1) * r / (s + r ** 2)
    W = (nu + 1) * (s - r ** 2) / (r ** 2 + s) ** 2
    return lp.sum(), grad, W


def mills_ratio(z):
    """``phi(z) / Phi(z)``, stable for large negative ``z``."""
    return np.sqrt(2.0 / np.pi) / special.erfcx(-np.asarray(z, float) / np.sqrt(2.0))


def _probit_terms(f, y):
    yf = y * f
    logcdf = special.log_ndtr(yf)
    ratio = mills_ratio(yf)  # phi(f) / Phi(y f)
    grad = y * ratio
    W = ratio ** 2 + yf * ratio
    return logcdf.sum(), grad, W


def probit_hessian(z, ysign):
    """Negative second derivative of ``log Phi(ysign * z)``.

    ``phi(z)^2 / Phi(y z)^2 + y z phi(z) / Phi(y z)``; strictly positive.
    """
    return _probit_terms(np.asarray(z, float), np.asarray(ysign, float))[2]


# ---------------------------------------------------------------- Laplace core

def laplace_mode(K, terms: Callable, a0=None, maxit=NEWTON_MAXIT, tol=NEWTON_TOL) -> LaplaceState:
    """Damped Newton search for the mode of ``log p(y|f) - f^T K^{-1} f / 2``.

    Works in ``a = K^{-1} f`` so ``K`` is never inverted. Exact Newton steps
    are used while the posterior Hessian is PD; otherwise the curvature is
    clamped at ``W_FLOOR``.
    """
    n = K.shape[0]
    a = np.zeros(n) if a0 is None else np.array(a0, dtype=float)
    f = K @ a
    lp, g, W = terms(f)
    psi = lp - 0.5 * a @ f
    it = 0
    gnorm = np.max(np.abs(g - a))
    while gnorm >= tol and it < maxit:
        it += 1
        rhs = g - a
        da = None
        if np.all(W > 0):
            sW = np.sqrt(W)
            try:
                L = linalg.cholesky(np.eye(n) + sW[:, None] * K * sW[None, :], lower=True)
                # (I + W K)^{-1} rhs via B = I + sW K sW
                da = rhs - sW * linalg.cho_solve((L, True), sW * (K @ rhs))
            except linalg.LinAlgError:
                da = None
        else:
            try:
                da = linalg.solve(np.eye(n) + W[:, None] * K, rhs)
                if not rhs @ (K @ da) > 0:
                    da = None
            except linalg.LinAlgError:
                da = None
        if da is None:
            Wc = np.maximum(W, W_FLOOR)
            sW = np.sqrt(Wc)
            L = linalg.cholesky(np.eye(n) + sW[:, None] * K * sW[None, :], lower=True)
            da = rhs - sW * linalg.cho_solve((L, True), sW * (K @ rhs))
        step = 1.0
        df = K @ da
        for _ in range(40):
            a_new = a + step * da
            f_new = f + step * df
            lp_new, g_new, W_new = terms(f_new)
            psi_new = lp_new - 0.5 * a_new @ f_new
            if np.isfinite(psi_new) and psi_new >= psi - 1e-12 * abs(psi):
                break
            step *= 0.5
        else:
            break
        a, f, lp, g, W, psi = a_new, f_new, lp_new, g_new, W_new, psi_new
        gnorm = np.max(np.abs(g - a))
    converged = gnorm < tol
    Wc = np.maximum(W, W_FLOOR)
    sW = np.sqrt(Wc)
    try:
        LB = linalg.cholesky(np.eye(n) + sW[:, None] * K * sW[None, :], lower=True)
        logdet = 2.0 * np.log(np.diag(LB)).sum()
    except linalg.LinAlgError:
        logdet = np.inf
    return LaplaceState(f, W, a, converged, it, float(gnorm), float(psi - 0.5 * logdet))


class LaplacePosterior(LinearGaussianPosterior):
    """Gaussian approximation with mean ``k K^{-1} mode`` and noise ``W^{-1}``."""

    def __init__(self, params, data, state: LaplaceState, jitter):
        self.params = params
        self.data = data
        self.state = state
        self.jitter = jitter
        K = kernel_matrix(data.X, params) + jitter * params.sigma_se ** 2 * np.eye(data.n)
        self.sW = np.sqrt(np.maximum(state.hess_diag, W_FLOOR))
        B = np.eye(data.n) + self.sW[:, None] * K * self.sW[None, :]
        self.chol = linalg.cholesky(B, lower=True)
        self.alpha = state.a

    @property
    def X(self):
        return self.data.X

    def _half(self, Xs):
        Ks = self._cross(Xs)
        V = linalg.solve_triangular(self.chol, self.sW[:, None] * Ks.T, lower=True, check_finite=False)
        return Ks, V


def _prior_K(X, params, jitter):
    return kernel_matrix(X, params) + jitter * params.sigma_se ** 2 * np.eye(X.shape[0])


def _safe_K(X, params):
    """Prior matrix with the smallest jitter that keeps it PD."""
    K = kernel_matrix(X, params)
    _, jit = stable_cholesky(K, params.sigma_se ** 2)
    return K + jit * params.sigma_se ** 2 * np.eye(X.shape[0]), jit


# ---------------------------------------------------------------- t-GP

class TGPPosterior(LaplacePosterior):
    kind = "tgp"

    def __init__(self, params, data, state, jitter, lookahead_reps=1.0):
        super().__init__(params, data, state, jitter)
        self.lookahead_reps = lookahead_reps

    def lookahead_noise(self, Xc):
        nu, tau = self.params.nu, self.params.tau
        return np.full(np.atleast_2d(Xc).shape[0], tau ** 2 * (nu + 1) / (nu - 1) / self.lookahead_reps)


def laplace_fit_tgp(data: TrainingSet, params: KernelParams, a0=None) -> LaplaceState:
    """Laplace mode for the t-observation GP, started at the Gaussian-GP mean."""
    if params.nu is None or params.tau <= 0:
        raise ValueError("t-GP needs nu > 2 and tau > 0")
    K, _ = _safe_K(data.X, params)
    if a0 is None:
        A = K + params.tau ** 2 * np.diag(1.0 / data.reps)
        a0 = linalg.solve(A, data.y, assume_a="pos")
    return laplace_mode(K, lambda f: _t_terms(f, data.y, params.tau, params.nu), a0)


def tgp_posterior(data, params, a0=None, lookahead_reps=1.0) -> TGPPosterior:
    K, jit = _safe_K(data.X, params)
    if a0 is None:
        A = K + params.tau ** 2 * np.diag(1.0 / data.reps)
        a0 = linalg.solve(A, data.y, assume_a="pos")
    state = laplace_mode(K, lambda f: _t_terms(f, data.y, params.tau, params.nu), a0)
    if not state.converged:
        raise FitError(
            f"t-GP Laplace mode did not converge: {state.iterations} iterations, "
            f"gradient norm {state.grad_norm:.3g}"
        )
    return TGPPosterior(params, data, state, jit, lookahead_reps)


def predict_tgp(state: LaplaceState, data: TrainingSet, params: KernelParams, Xstar):
    """Mean ``k K^{-1} mode`` and covariance with ``[K + W^{-1}]^{-1}``."""
    _, jit = _safe_K(data.X, params)
    return TGPPosterior(params, data, state, jit).predict_cov(Xstar)


class _LaplaceObjective:
    """Negative Laplace evidence over log-hyperparameters, warm-starting the mode."""

    def __init__(self, data, unpack, terms_factory, a0=None):
        self.data = data
        self.unpack = unpack
        self.terms_factory = terms_factory
        self.a_last = a0
        self.a_init = a0

    def __call__(self, u):
        try:
            p = self.unpack(u)
            K, _ = _safe_K(self.data.X, p)
        except (FitError, ValueError):
            return 1e25
        terms = self.terms_factory(p)
        st = laplace_mode(K, terms, self.a_last)
        if not st.converged:
            st = laplace_mode(K, terms, self.a_init)
        if not st.converged or not np.isfinite(st.log_evidence):
            return 1e25
        self.a_last = st.a
        return -st.log_evidence


def fit_tgp(
    data: TrainingSet,
    param_bounds: Optional[ParamBounds] = None,
    restarts: int = 3,
    rng=None,
    init: Sequence[KernelParams] = (),
    lookahead_reps: float = 1.0,
) -> TGPPosterior:
    """ML-II fit of (sigma, theta, tau, nu) under the Laplace evidence."""
    rng = np.random.default_rng(rng)
    bounds = param_bounds or default_bounds(data, nu=(2.1, 50.0))
    d = data.dim
    box = bounds.log_box(d, with_tau=True, with_nu=True)
    starts = [np.log(np.r_[p.sigma_se, p.theta_arr, p.tau, p.nu or 4.0]) for p in init]
    if not starts:
        g = fit_gaussian_gp(data, bounds, restarts=2, rng=rng).params
        starts = [np.log(np.r_[g.sigma_se, g.theta_arr, 0.7 * g.tau, 4.0])]
    starts = starts[:restarts] + random_starts(box, max(restarts - len(starts), 0), rng)

    def unpack(u):
        e = np.exp(u)
        return KernelParams(e[0], tuple(e[1 : 1 + d]), e[1 + d], nu=e[2 + d])

    obj = _LaplaceObjective(data, unpack, lambda p: (lambda f: _t_terms(f, data.y, p.tau, p.nu)))
    best = multistart_minimize(obj, box, starts, jac=None, tol=1e-5, maxiter=100, eps=1e-5)
    if best is None:
        raise FitError("all ML starts failed for the t-GP")
    return tgp_posterior(data, unpack(best.x), lookahead_reps=lookahead_reps)


# ---------------------------------------------------------------- Cl-GP

def signed_responses(y) -> np.ndarray:
    """``sgn(y)`` with zeros mapped to +1."""
    return np.where(np.asarray(y, float) >= 0, 1.0, -1.0)


class ClassificationPosterior(LaplacePosterior):
    """Latent probit-GP posterior; ``predict`` returns ``(z_hat, s^2)``."""

    kind = "clgp"

    def lookahead_noise(self, Xc):
        zhat, s2 = self.predict(Xc)
        return 1.0 / expected_probit_curvature(zhat, s2)

    def class_probability(self, Xs):
        zhat, s2 = self.predict(Xs)
        return clgp_class_probability(zhat, np.sqrt(s2))


def laplace_fit_clgp(signed_data: TrainingSet, params: KernelParams, a0=None) -> LaplaceState:
    """Laplace mode of the probit classification GP (responses in {-1, +1})."""
    ys = signed_data.y
    if not np.all(np.isin(ys, (-1.0, 1.0))):
        raise ValueError("classification responses must be -1 or +1")
    K, _ = _safe_K(signed_data.X, params)
    return laplace_mode(K, lambda f: _probit_terms(f, ys), a0)


def clgp_posterior(signed_data: TrainingSet, params: KernelParams, a0=None) -> ClassificationPosterior:
    K, jit = _safe_K(signed_data.X, params)
    st = laplace_mode(K, lambda f: _probit_terms(f, signed_data.y), a0)
    if not st.converged:
        raise FitError(f"Cl-GP Laplace mode did not converge (gradient {st.grad_norm:.3g})")
    return ClassificationPosterior(params, signed_data, st, jit)


def predict_clgp(state: LaplaceState, data: TrainingSet, params: KernelParams, Xstar):
    """Latent mean ``z_hat`` and covariance with ``[K + V^{-1}]^{-1}``."""
    _, jit = _safe_K(data.X, params)
    return ClassificationPosterior(params, data, state, jit).predict_cov(Xstar)


def clgp_class_probability(zhat, s):
    """``P(x in S) = Phi(z_hat / sqrt(1 + s^2))``."""
    zhat = np.asarray(zhat, float)
    s = np.asarray(s, float)
    with np.errstate(over="ignore"):
        return special.ndtr(zhat / np.sqrt(1.0 + s ** 2))


def expected_probit_curvature(zhat, s2):
    """Sign-averaged curvature ``p+ v+ + p- v-`` at the current latent mean."""
    zhat = np.asarray(zhat, float)
    p_plus = special.ndtr(zhat / np.sqrt(1.0 + s2))
    v_plus = probit_hessian(zhat, np.ones_like(zhat))
    v_minus = probit_hessian(zhat, -np.ones_like(zhat))
    return v_plus * p_plus + v_minus * (1.0 - p_plus)


def fit_clgp(
    data: TrainingSet,
    param_bounds: Optional[ParamBounds] = None,
    restarts: int = 3,
    rng=None,
    init: Sequence[KernelParams] = (),
) -> ClassificationPosterior:
    """ML-II fit of (sigma, theta) for the probit GP on ``sgn(y)``.

    ``data.y`` may hold raw responses; they are converted with
    :func:`signed_responses`.
    """
    rng = np.random.default_rng(rng)
    signed = TrainingSet(data.X, signed_responses(data.y), data.reps)
    d = data.dim
    bounds = param_bounds or ParamBounds(sigma=(0.1, 10.0))
    box = bounds.log_box(d, with_tau=False)
    starts = [np.log(np.r_[p.sigma_se, p.theta_arr]) for p in init] or [np.log(np.r_[2.0, [0.5] * d])]
    starts = starts[:restarts] + random_starts(box, max(restarts - len(starts), 0), rng)

    def unpack(u):
        e = np.exp(u)
        return KernelParams(e[0], tuple(e[1 : 1 + d]), 0.0)

    obj = _LaplaceObjective(signed, unpack, lambda p: (lambda f: _probit_terms(f, signed.y)))
    best = multistart_minimize(obj, box, starts, jac=None, tol=1e-5, maxiter=100, eps=1e-5)
    if best is None:
        raise FitError("all ML starts failed for the Cl-GP")
    return clgp_posterior(signed, unpack(best.x))


# ---------------------------------------------------------------- TP

@dataclass
class TPosterior(GaussianPosterior):
    """Student-t process: Gaussian-GP algebra with a data-dependent variance scale."""

    kind = "tp"

    @property
    def nu(self) -> float:
        return self.params.nu

    @property
    def dof(self) -> float:
        return self.params.nu + self.data.n

    @property
    def inflation(self) -> float:
        """``(nu + beta - 2) / (nu + n - 2)``."""
        return (self.nu + self.beta - 2.0) / (self.nu + self.data.n - 2.0)

    def predict(self, Xs):
        mean, var = self.base_predict(Xs)
        return mean, self.inflation * var

    def predict_cov(self, Xs):
        mean, _ = self.base_predict(Xs)
        return mean, self.inflation * self.base_cov(Xs)

    def cross_cov(self, X1, X2):
        return self.inflation * self.base_cov(X1, X2)

    def lookahead_factor(self) -> float:
        beta_next = self.beta + self.nu / (self.nu - 2.0)
        return (self.nu + beta_next - 2.0) / (self.nu + self.data.n - 1.0)


def tp_posterior(data: TrainingSet, params: KernelParams, lookahead_reps=1.0) -> TPosterior:
    g = build_gaussian_posterior(params, data)
    return TPosterior(params, data, g.chol, g.alpha, g.jitter, lookahead_reps=lookahead_reps)


def tp_log_marginal_likelihood(params: KernelParams, data: TrainingSet) -> float:
    """Multivariate-t log density of ``y`` with covariance ``K + tau^2 I`` and ``nu`` dof."""
    post = build_gaussian_posterior(params, data)
    return _tp_lml(post, params.nu)


def _tp_lml(post, nu):
    n = post.data.n
    beta = post.beta
    return float(
        special.gammaln((nu + n) / 2) - special.gammaln(nu / 2)
        - 0.5 * n * np.log((nu - 2) * np.pi)
        - np.log(np.diag(post.chol)).sum()
        - 0.5 * (nu + n) * np.log1p(beta / (nu - 2))
    )


def _tp_neg_lml_grad(u, data: TrainingSet):
    d = data.dim
    e = np.exp(u)
    try:
        p = KernelParams(e[0], tuple(e[1 : 1 + d]), e[1 + d], nu=e[2 + d])
        post = build_gaussian_posterior(p, data)
    except (FitError, ValueError):
        return 1e25, np.zeros_like(u)
    nu, n, beta = p.nu, data.n, post.beta
    lml = _tp_lml(post, nu)
    c = (nu + n) / (nu - 2 + beta)
    Ainv = linalg.cho_solve((post.chol, True), np.eye(n))
    Q = c * np.outer(post.alpha, post.alpha) - Ainv
    K = kernel_matrix(data.X, p)
    grad = np.empty_like(u)
    grad[0] = 0.5 * np.sum(Q * 2.0 * K)
    for j in range(d):
        D = (data.X[:, j : j + 1] - data.X[:, j : j + 1].T) ** 2 / p.theta[j] ** 2
        grad[1 + j] = 0.5 * np.sum(Q * K * D)
    grad[1 + d] = 0.5 * np.sum(np.diag(Q) * 2.0 * post.noise_diag)
    dnu = (
        0.5 * special.digamma((nu + n) / 2) - 0.5 * special.digamma(nu / 2)
        - 0.5 * n / (nu - 2) - 0.5 * np.log1p(beta / (nu - 2))
        + 0.5 * (nu + n) * beta / ((nu - 2) * (nu - 2 + beta))
    )
    grad[2 + d] = dnu * nu
    if not np.isfinite(lml):
        return 1e25, np.zeros_like(u)
    return -lml, -grad


def fit_tp(
    data: TrainingSet,
    param_bounds: Optional[ParamBounds] = None,
    restarts: int = 5,
    rng=None,
    init: Sequence[KernelParams] = (),
    lookahead_reps: float = 1.0,
) -> TPosterior:
    """ML fit of (sigma, theta, tau, nu) with ``nu`` in [2.1, 10] by default."""
    if data.n < 2:
        raise ValueError("need at least two observations to fit a TP")
    rng = np.random.default_rng(rng)
    bounds = param_bounds or default_bounds(data, nu=(2.1, 10.0))
    d = data.dim
    box = bounds.log_box(d, with_tau=True, with_nu=True)
    starts = [np.log(np.r_[p.sigma_se, p.theta_arr, p.tau, p.nu or 5.0]) for p in init]
    if not starts:
        sy = max(float(np.std(data.y)), 1e-8)
        starts = [np.log(np.r_[np.clip(sy, *bounds.sigma), [0.5] * d, np.clip(0.3 * sy, *bounds.tau), 5.0])]
    starts = starts[:restarts] + random_starts(box, max(restarts - len(starts), 0), rng)
    best = multistart_minimize(lambda u: _tp_neg_lml_grad(u, data), box, starts)
    if best is None:
        raise FitError("all ML starts failed for the TP")
    e = np.exp(best.x)
    p = KernelParams(e[0], tuple(e[1 : 1 + d]), e[1 + d], nu=e[2 + d])
    return tp_posterior(data, p, lookahead_reps)


def predict_tp(tp: TPosterior, Xstar):
    """Mean, inflated covariance and predictive degrees of freedom."""
    mean, cov = tp.predict_cov(Xstar)
    return mean, cov, tp.dof
