"""Squared-exponential GP regression: kernel, marginal likelihood, ML fitting
and exact rank-one posterior updates.

All surrogates in the package share the posterior algebra in
:class:`LinearGaussianPosterior`: a mean ``k(x*) @ alpha`` and a covariance
``K(x*, x*') - k(x*) A^{-1} k(x*')`` for some PD matrix ``A`` held through its
Cholesky factor.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, optimize

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
JITTER_START = 1e-8
JITTER_MAX = 1e-4
THETA_BOUNDS = (0.3, 2.0)


class FitError(RuntimeError):
    """Raised when a surrogate (or one of its linear systems) cannot be fitted."""


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters of the SE kernel plus observation noise.

    ``theta`` holds one lengthscale per input dimension; ``nu`` is only used
    by the Student-t models.
    """

    sigma_se: float
    theta: tuple
    tau: float
    nu: Optional[float] = None

    def __post_init__(self):
        theta = tuple(float(t) for t in np.atleast_1d(self.theta))
        object.__setattr__(self, "theta", theta)
        if not self.sigma_se > 0:
            raise ValueError(f"sigma_se must be positive, got {self.sigma_se}")
        if len(theta) == 0 or min(theta) <= 0:
            raise ValueError(f"lengthscales must be positive, got {theta}")
        if self.tau < 0:
            raise ValueError(f"tau must be nonnegative, got {self.tau}")
        if self.nu is not None and not self.nu > 2:
            raise ValueError(f"nu must exceed 2, got {self.nu}")

    @property
    def dim(self) -> int:
        return len(self.theta)

    @property
    def theta_arr(self) -> np.ndarray:
        return np.asarray(self.theta)

    def with_(self, **kw) -> "KernelParams":
        return replace(self, **kw)


@dataclass(frozen=True)
class TrainingSet:
    """Design points, responses and optional replication counts.

    When ``reps`` is given, ``y`` holds batch means and the observation
    noise variance of point ``i`` is ``tau**2 / reps[i]``.
    """

    X: np.ndarray
    y: np.ndarray
    reps: np.ndarray = field(default=None)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            if X.shape[0] == 1 and X.shape[1] == y.shape[0]:
                X = X.T
            else:
                raise ValueError(f"{X.shape[0]} inputs but {y.shape[0]} responses")
        if X.shape[0] < 1:
            raise ValueError("training set must be nonempty")
        reps = np.ones(len(y)) if self.reps is None else np.asarray(self.reps, dtype=float).ravel()
        if reps.shape != y.shape or np.any(reps < 1):
            raise ValueError("replication counts must be >= 1, one per input")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "reps", reps)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def append(self, x_new, y_new, rep=1.0) -> "TrainingSet":
        x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
        return TrainingSet(
            np.vstack([self.X, x_new]),
            np.append(self.y, np.ravel(y_new)),
            np.append(self.reps, np.broadcast_to(rep, (x_new.shape[0],))),
        )


def _sqdist_scaled(X1, X2, theta):
    A = X1 / theta
    B = X2 / theta
    d2 = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d2, 0.0)


def se_kernel(x, x2, params: KernelParams) -> float:
    """SE covariance between two single points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape or x.shape[0] != params.dim:
        raise ValueError(f"dimension mismatch: {x.shape}, {x2.shape}, theta has {params.dim}")
    r2 = np.sum((x - x2) ** 2 / params.theta_arr ** 2)
    return params.sigma_se ** 2 * np.exp(-0.5 * r2)


def kernel_matrix(X, params: KernelParams, X2=None) -> np.ndarray:
    """SE covariance matrix ``K(X, X2)`` (``X2`` defaults to ``X``)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X2 = X if X2 is None else np.atleast_2d(np.asarray(X2, dtype=float))
    if X.shape[1] != params.dim or X2.shape[1] != params.dim:
        raise ValueError(f"inputs have {X.shape[1]}/{X2.shape[1]} columns, theta has {params.dim}")
    K = params.sigma_se ** 2 * np.exp(-0.5 * _sqdist_scaled(X, X2, params.theta_arr))
    if X2 is X:
        np.fill_diagonal(K, params.sigma_se ** 2)
    return K


def stable_cholesky(A: np.ndarray, scale: float, jitter: float = JITTER_START):
    """Cholesky of ``A + jitter*scale*I``, escalating jitter x10 up to 1e-4.

    Returns ``(L, jitter_used)``; raises :class:`FitError` if every attempt fails.
    """
    n = A.shape[0]
    while True:
        try:
            L = linalg.cholesky(A + (jitter * scale) * np.eye(n), lower=True, check_finite=False)
            return L, jitter
        except (linalg.LinAlgError, ValueError):
            if jitter >= JITTER_MAX * (1 - 1e-12):
                raise FitError("matrix not positive definite after maximal jitter")
            jitter = min(jitter * 10.0, JITTER_MAX)


class LinearGaussianPosterior:
    """Shared prediction algebra for every GP-family surrogate.

    Subclasses set ``params``, ``X`` (inputs of the latent observations),
    ``chol`` (lower Cholesky of ``A``) and ``alpha``. The noise added to
    ``A`` is model specific.
    """

    kind = "base"
    params: KernelParams
    X: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    dof: Optional[float] = None
    lookahead_reps: float = 1.0

    # -- building blocks, overridden by the monotone model
    def _cross(self, Xs):
        return kernel_matrix(Xs, self.params, self.X)

    def _prior_var(self, Xs):
        return np.full(Xs.shape[0], self.params.sigma_se ** 2)

    def _half(self, Xs):
        Ks = self._cross(Xs)
        V = linalg.solve_triangular(self.chol, Ks.T, lower=True, check_finite=False)
        return Ks, V

    # -- predictions before any Student-t process inflation
    def base_predict(self, Xs):
        Xs = np.atleast_2d(np.asarray(Xs, dtype=float))
        Ks, V = self._half(Xs)
        var = self._prior_var(Xs) - np.einsum("ij,ij->j", V, V)
        return Ks @ self.alpha, np.maximum(var, 0.0)

    def base_cov(self, X1, X2=None):
        X1 = np.atleast_2d(np.asarray(X1, dtype=float))
        _, V1 = self._half(X1)
        if X2 is None:
            return kernel_matrix(X1, self.params) - V1.T @ V1
        X2 = np.atleast_2d(np.asarray(X2, dtype=float))
        _, V2 = self._half(X2)
        return kernel_matrix(X1, self.params, X2) - V1.T @ V2

    # -- public surrogate interface
    def predict(self, Xs):
        """Posterior mean and marginal variance at the rows of ``Xs``."""
        return self.base_predict(Xs)

    def predict_cov(self, Xs):
        """Posterior mean and full covariance matrix at the rows of ``Xs``."""
        mean, _ = self.base_predict(Xs)
        return mean, self.base_cov(Xs)

    def cross_cov(self, X1, X2):
        return self.base_cov(X1, X2)

    def lookahead_noise(self, Xc) -> np.ndarray:
        """Effective noise variance of a hypothetical new sample at each ``Xc`` row."""
        raise NotImplementedError

    def lookahead_factor(self) -> float:
        """Scalar applied to the one-step-ahead base variance (TP only)."""
        return 1.0

    @property
    def n(self) -> int:
        return self.X.shape[0]


@dataclass
class GaussianPosterior(LinearGaussianPosterior):
    """GP posterior under Gaussian observation noise ``tau**2 / reps``."""

    params: KernelParams
    data: TrainingSet
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = JITTER_START
    lookahead_reps: float = 1.0
    kind = "gp"

    @property
    def X(self):
        return self.data.X

    @property
    def noise_diag(self) -> np.ndarray:
        return self.params.tau ** 2 / self.data.reps

    def system_matrix(self) -> np.ndarray:
        """``K + diag(tau^2/r)`` without jitter."""
        return kernel_matrix(self.data.X, self.params) + np.diag(self.noise_diag)

    def lookahead_noise(self, Xc):
        # include the jitter so that the look-ahead reproduces update_gaussian exactly
        Xc = np.atleast_2d(Xc)
        p = self.params
        return np.full(Xc.shape[0], p.tau ** 2 / self.lookahead_reps + self.jitter * p.sigma_se ** 2)

    @property
    def beta(self) -> float:
        """Quadratic form ``y^T A^{-1} y``."""
        return float(self.data.y @ self.alpha)


def build_gaussian_posterior(params: KernelParams, data: TrainingSet, jitter=JITTER_START, **kw) -> GaussianPosterior:
    A = kernel_matrix(data.X, params) + np.diag(params.tau ** 2 / data.reps)
    L, jit = stable_cholesky(A, params.sigma_se ** 2, jitter)
    alpha = linalg.cho_solve((L, True), data.y, check_finite=False)
    return GaussianPosterior(params, data, L, alpha, jit, **kw)


def log_marginal_likelihood(params: KernelParams, data: TrainingSet) -> float:
    """``log N(y; 0, K + diag(tau^2/r))``."""
    post = build_gaussian_posterior(params, data)
    return _lml_from_post(post)


def _lml_from_post(post: GaussianPosterior) -> float:
    y = post.data.y
    return float(-0.5 * y @ post.alpha - np.log(np.diag(post.chol)).sum() - 0.5 * len(y) * LOG_2PI)


@dataclass(frozen=True)
class ParamBounds:
    sigma: tuple
    theta: tuple = THETA_BOUNDS
    tau: tuple = (1e-4, 10.0)
    nu: tuple = (2.1, 50.0)

    def log_box(self, d: int, with_tau=True, with_nu=False):
        box = [self.sigma] + [self.theta] * d
        if with_tau:
            box.append(self.tau)
        if with_nu:
            box.append(self.nu)
        return [(np.log(lo), np.log(hi)) for lo, hi in box]


def default_bounds(data: TrainingSet, nu=(2.1, 50.0)) -> ParamBounds:
    """Data-scaled bounds; lengthscales always in [0.3, 2] for unit-cube inputs."""
    sy = float(np.std(data.y))
    if not np.isfinite(sy) or sy <= 0:
        sy = max(float(np.max(np.abs(data.y))), 1.0)
    return ParamBounds(sigma=(1e-2 * sy, 10.0 * sy), tau=(1e-3 * sy, 3.0 * sy), nu=nu)


def _unpack(u, d, nu=None):
    e = np.exp(u)
    return KernelParams(sigma_se=e[0], theta=tuple(e[1 : 1 + d]), tau=e[1 + d], nu=nu)


def _pack(p: KernelParams):
    return np.log(np.r_[p.sigma_se, p.theta_arr, max(p.tau, 1e-12)])


def _neg_lml_grad(u, data: TrainingSet):
    d = data.dim
    try:
        p = _unpack(u, d)
        post = build_gaussian_posterior(p, data)
    except (FitError, ValueError, FloatingPointError):
        return 1e25, np.zeros_like(u)
    lml = _lml_from_post(post)
    Ainv = linalg.cho_solve((post.chol, True), np.eye(data.n), check_finite=False)
    Q = np.outer(post.alpha, post.alpha) - Ainv
    K = kernel_matrix(data.X, p)
    grad = np.empty_like(u)
    grad[0] = 0.5 * np.sum(Q * (2.0 * K))
    for j in range(d):
        D = (data.X[:, j : j + 1] - data.X[:, j : j + 1].T) ** 2 / p.theta[j] ** 2
        grad[1 + j] = 0.5 * np.sum(Q * (K * D))
    grad[1 + d] = 0.5 * np.sum(np.diag(Q) * 2.0 * post.noise_diag)
    if not np.isfinite(lml):
        return 1e25, np.zeros_like(u)
    return -lml, -grad


def random_starts(box, count, rng):
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    return [lo + (hi - lo) * rng.random(len(box)) for _ in range(count)]


def multistart_minimize(fun, box, starts, jac=True, tol=1e-6, maxiter=200, eps=None):
    """Run bounded L-BFGS-B from each start, return the best ``OptimizeResult``.

    ``eps`` sets the finite-difference step when ``jac`` is None.
    """
    options = {"gtol": tol, "maxiter": maxiter}
    if eps is not None and not jac:
        options["eps"] = eps
    best = None
    for u0 in starts:
        u0 = np.clip(u0, [b[0] for b in box], [b[1] for b in box])
        try:
            res = optimize.minimize(
                fun, u0, jac=jac, method="L-BFGS-B", bounds=box, options=options,
            )
        except (FitError, linalg.LinAlgError, ValueError) as exc:
            logger.debug("start %s failed: %s", u0, exc)
            continue
        if np.isfinite(res.fun) and res.fun < 1e24 and (best is None or res.fun < best.fun):
            best = res
    return best


def heuristic_params(data: TrainingSet, bounds: ParamBounds) -> KernelParams:
    sy = max(float(np.std(data.y)), 1e-8)
    clip = lambda v, b: float(np.clip(v, b[0], b[1]))
    return KernelParams(
        sigma_se=clip(sy, bounds.sigma),
        theta=(clip(0.5, bounds.theta),) * data.dim,
        tau=clip(0.3 * sy, bounds.tau),
    )


def fit_gaussian_gp(
    data: TrainingSet,
    param_bounds: Optional[ParamBounds] = None,
    restarts: int = 5,
    rng=None,
    init: Sequence[KernelParams] = (),
    lookahead_reps: float = 1.0,
) -> GaussianPosterior:
    """Maximum-likelihood GP fit with multi-start L-BFGS-B on log-parameters.

    The first start is ``init`` (if given) or a data-driven heuristic; the
    remaining ``restarts - 1`` starts are uniform in the log-box.
    """
    if data.n < 2:
        raise ValueError("need at least two observations to fit hyperparameters")
    rng = np.random.default_rng(rng)
    bounds = param_bounds or default_bounds(data)
    box = bounds.log_box(data.dim)
    starts = [_pack(p) for p in init] or [_pack(heuristic_params(data, bounds))]
    starts = starts[:restarts] + random_starts(box, max(restarts - len(starts), 0), rng)
    best = multistart_minimize(lambda u: _neg_lml_grad(u, data), box, starts)
    if best is None:
        raise FitError("all ML starts failed for the Gaussian GP")
    return build_gaussian_posterior(_unpack(best.x, data.dim), data, lookahead_reps=lookahead_reps)


def predict_gaussian(post: GaussianPosterior, Xstar):
    """Posterior mean vector and full covariance matrix."""
    return post.predict_cov(Xstar)


def update_gaussian(post: GaussianPosterior, x_new, y_new, rep: float = 1.0) -> GaussianPosterior:
    """Add one observation with fixed hyperparameters via a bordered Cholesky.

    Equivalent (to rounding) to refitting from scratch with the same
    ``params`` and jitter.
    """
    p = post.params
    x_new = np.atleast_2d(np.asarray(x_new, dtype=float))
    k = kernel_matrix(post.data.X, p, x_new)[:, 0]
    l12 = linalg.solve_triangular(post.chol, k, lower=True, check_finite=False)
    d = p.sigma_se ** 2 * (1.0 + post.jitter) + p.tau ** 2 / rep - l12 @ l12
    if d <= 0:
        # bordered factor lost definiteness: refactor from scratch
        return build_gaussian_posterior(p, post.data.append(x_new, y_new, rep), post.jitter,
                                        lookahead_reps=post.lookahead_reps)
    n = post.data.n
    L = np.zeros((n + 1, n + 1))
    L[:n, :n] = post.chol
    L[n, :n] = l12
    L[n, n] = np.sqrt(d)
    data = post.data.append(x_new, y_new, rep)
    alpha = linalg.cho_solve((L, True), data.y, check_finite=False)
    return GaussianPosterior(p, data, L, alpha, post.jitter, lookahead_reps=post.lookahead_reps)
