"""Monotonicity-constrained GP regression and classification.

Monotonicity is encouraged through virtual derivative observations
``Phi(direction * df/dx_j(x_v) / eta)`` which, together with probit data
sites for the classification variant, are approximated by expectation
propagation. The latent vector is ``[f(X); df/dx_{j_v}(x_v)]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import linalg, special
from scipy.stats import qmc

from .gp_core import (
    JITTER_START,
    FitError,
    KernelParams,
    LinearGaussianPosterior,
    TrainingSet,
    kernel_matrix,
)
from .robust_models import expected_probit_curvature, mills_ratio, signed_responses

logger = logging.getLogger(__name__)

EP_DAMPING = 0.8
EP_MAX_SWEEPS = 200
EP_TOL = 1e-6
ETA_REL = 1e-6
TAU_SITE_MIN = 1e-12
SITE_VAR_REL_MIN = 1e-8  # site variance floor relative to the prior variance


@dataclass(frozen=True)
class VirtualDerivObs:
    location: tuple
    coordinate: int
    direction: int = 1
    eta: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "location", tuple(float(v) for v in np.ravel(self.location)))
        if self.direction not in (-1, 1):
            raise ValueError("direction must be -1 or +1")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not 0 <= self.coordinate < len(self.location):
            raise ValueError("coordinate out of range")

    @property
    def key(self):
        return (self.location, self.coordinate)


@dataclass
class EPSites:
    """Gaussian site approximations, one per latent entry (data sites first)."""

    mu_tilde: np.ndarray
    sigma2_tilde: np.ndarray
    converged: bool
    sweeps: int = 0


# ---------------------------------------------------------------- kernels

def _kfg(X1, X2, coords2, params: KernelParams):
    """cov(f(X1), d f / d x_{c}(X2)) for coordinates ``coords2``."""
    th2 = params.theta_arr ** 2
    K = kernel_matrix(X1, params, X2)
    c = np.asarray(coords2, int)
    diff = X1[:, c] - X2[np.arange(len(c)), c][None, :]  # x1_c - x2_c
    return K * diff / th2[c][None, :]


def _kgg(X1, coords1, X2, coords2, params: KernelParams):
    """cov(d f/d x_{a}(X1), d f/d x_{b}(X2))."""
    th2 = params.theta_arr ** 2
    K = kernel_matrix(X1, params, X2)
    a = np.asarray(coords1, int)
    b = np.asarray(coords2, int)
    da = X1[np.arange(len(a)), a][:, None] - X2[:, a].T.reshape(len(a), -1)  # (x1_a - x2_a)
    # x1_b - x2_b for each pair (i, j) with b = coords2[j]
    db = X1[:, b] - X2[np.arange(len(b)), b][None, :]
    same = (a[:, None] == b[None, :]).astype(float)
    return K * (same / th2[a][:, None] - da * db / (th2[a][:, None] * th2[b][None, :]))


def joint_kernel(X, Xv, coords, params: KernelParams) -> np.ndarray:
    """Prior covariance of ``[f(X); df/dx_{coords}(Xv)]``."""
    X = np.atleast_2d(np.asarray(X, float))
    Kff = kernel_matrix(X, params)
    if len(coords) == 0:
        return Kff
    Xv = np.atleast_2d(np.asarray(Xv, float))
    Kfg = _kfg(X, Xv, coords, params)
    Kgg = _kgg(Xv, coords, Xv, coords, params)
    Kgg = 0.5 * (Kgg + Kgg.T)
    return np.block([[Kff, Kfg], [Kfg.T, Kgg]])


def _virtual_arrays(virtual: Sequence[VirtualDerivObs], d):
    if not virtual:
        return np.zeros((0, d)), np.zeros(0, int), np.zeros(0), np.zeros(0)
    Xv = np.array([v.location for v in virtual])
    return (
        Xv,
        np.array([v.coordinate for v in virtual], int),
        np.array([v.direction for v in virtual], float),
        np.array([v.eta for v in virtual], float),
    )


# ---------------------------------------------------------------- EP

def _probit_moments(mu_c, s2_c, y, eta):
    """Moments of ``N(mu_c, s2_c) * Phi(y u / eta)`` (normalised)."""
    denom = np.sqrt(eta ** 2 + s2_c)
    z = y * mu_c / denom
    ratio = mills_ratio(z)
    mu_hat = mu_c + y * s2_c * ratio / denom
    shrink = s2_c * ratio * (z + ratio) / (eta ** 2 + s2_c)
    s2_hat = s2_c * np.maximum(1.0 - shrink, 1e-10)
    return mu_hat, s2_hat


def _posterior_from_sites(K, tau_t, nu_t):
    sW = np.sqrt(tau_t)
    n = K.shape[0]
    L = linalg.cholesky(np.eye(n) + sW[:, None] * K * sW[None, :], lower=True)
    V = linalg.solve_triangular(L, sW[:, None] * K, lower=True)
    Sigma = K - V.T @ V
    return Sigma, Sigma @ nu_t, L


def run_ep(K, fixed_tau, fixed_nu, probit_idx, probit_y, probit_eta,
           damping=EP_DAMPING, max_sweeps=EP_MAX_SWEEPS, tol=EP_TOL):
    """Sequential EP with Gaussian sites fixed at ``(fixed_tau, fixed_nu)``
    and probit sites at ``probit_idx``. Returns natural site parameters."""
    tau_t = np.array(fixed_tau, float)
    nu_t = np.array(fixed_nu, float)
    if len(probit_idx) == 0:
        return tau_t, nu_t, True, 0
    tau_t[probit_idx] = TAU_SITE_MIN
    nu_t[probit_idx] = 0.0
    tau_cap = 1.0 / (SITE_VAR_REL_MIN * np.diag(K))
    Sigma, mu, _ = _posterior_from_sites(K, tau_t, nu_t)
    converged = False
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        tau_old, nu_old = tau_t.copy(), nu_t.copy()
        for k, i in enumerate(probit_idx):
            if not Sigma[i, i] > 0:
                Sigma, mu, _ = _posterior_from_sites(K, tau_t, nu_t)
            tau_c = 1.0 / Sigma[i, i] - tau_t[i]
            if not tau_c > 0:
                continue
            nu_c = mu[i] / Sigma[i, i] - nu_t[i]
            mu_hat, s2_hat = _probit_moments(nu_c / tau_c, 1.0 / tau_c, probit_y[k], probit_eta[k])
            tau_new = (1 - damping) * tau_t[i] + damping * (1.0 / s2_hat - tau_c)
            tau_new = min(max(tau_new, TAU_SITE_MIN), tau_cap[i])
            nu_new = (1 - damping) * nu_t[i] + damping * (mu_hat / s2_hat - nu_c)
            dtau = tau_new - tau_t[i]
            tau_t[i], nu_t[i] = tau_new, nu_new
            si = Sigma[:, i].copy()
            Sigma -= (dtau / (1.0 + dtau * si[i])) * np.outer(si, si)
            mu = Sigma @ nu_t
        Sigma, mu, _ = _posterior_from_sites(K, tau_t, nu_t)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(tau_t))):
            raise FitError(f"EP diverged at sweep {sweep}: nonfinite site parameters")
        change = max(
            np.max(np.abs(tau_t - tau_old) / (1.0 + np.abs(tau_old))),
            np.max(np.abs(nu_t - nu_old) / (1.0 + np.abs(nu_old))),
        )
        if change < tol:
            converged = True
            break
    if not converged:
        logger.warning("EP stopped after %d sweeps without reaching tolerance", sweep)
    return tau_t, nu_t, converged, sweep


# ---------------------------------------------------------------- posterior

class MonotonePosterior(LinearGaussianPosterior):
    """Joint posterior of function values and virtual derivatives.

    ``predict`` refers to the function (or latent, for classification);
    :meth:`predict_derivative` to partial derivatives.
    """

    def __init__(self, params, data, virtual, tau_t, nu_t, converged, sweeps,
                 classification=False, jitter=JITTER_START, lookahead_reps=1.0):
        self.params = params
        self.data = data
        self.virtual = list(virtual)
        self.classification = classification
        self.kind = "mclgp" if classification else "mgp"
        self.jitter = jitter
        self.lookahead_reps = lookahead_reps
        self.Xv, self.coords, self.dirs, self.etas = _virtual_arrays(self.virtual, data.dim)
        self.Kj = joint_kernel(data.X, self.Xv, self.coords, params)
        self.sW = np.sqrt(tau_t)
        n = self.Kj.shape[0]
        self.chol = linalg.cholesky(np.eye(n) + self.sW[:, None] * self.Kj * self.sW[None, :], lower=True)
        # (K + S~)^{-1} mu~ = nu~ - (K + S~)^{-1} K nu~, safe for tiny site precisions
        self.alpha = nu_t - self.sW * linalg.cho_solve((self.chol, True), self.sW * (self.Kj @ nu_t))
        self.sites = EPSites(nu_t / tau_t, 1.0 / tau_t, converged, sweeps)

    @property
    def X(self):
        return self.data.X

    def _cross(self, Xs):
        Kf = kernel_matrix(Xs, self.params, self.data.X)
        if not self.virtual:
            return Kf
        return np.hstack([Kf, _kfg(Xs, self.Xv, self.coords, self.params)])

    def _half(self, Xs):
        Ks = self._cross(Xs)
        V = linalg.solve_triangular(self.chol, self.sW[:, None] * Ks.T, lower=True, check_finite=False)
        return Ks, V

    def predict_derivative(self, Xs, coord: int):
        """Posterior mean and variance of ``df/dx_coord`` at ``Xs``."""
        Xs = np.atleast_2d(np.asarray(Xs, float))
        c = np.full(Xs.shape[0], coord, int)
        # cov(g(Xs), f(X)) = cov(f(X), g(Xs))^T
        parts = [_kfg(self.data.X, Xs, c, self.params).T]
        if self.virtual:
            parts.append(_kgg(Xs, c, self.Xv, self.coords, self.params))
        Kd = np.hstack(parts)
        V = linalg.solve_triangular(self.chol, self.sW[:, None] * Kd.T, lower=True, check_finite=False)
        var = self.params.sigma_se ** 2 / self.params.theta[coord] ** 2 - np.einsum("ij,ij->j", V, V)
        return Kd @ self.alpha, np.maximum(var, 0.0)

    def lookahead_noise(self, Xc):
        Xc = np.atleast_2d(Xc)
        if self.classification:
            zhat, s2 = self.predict(Xc)
            return 1.0 / expected_probit_curvature(zhat, s2)
        return np.full(Xc.shape[0], self.params.tau ** 2 / self.lookahead_reps)

    def class_probability(self, Xs):
        zhat, s2 = self.predict(Xs)
        return special.ndtr(zhat / np.sqrt(1.0 + s2))


def ep_fit_monotone(data: TrainingSet, virtual_obs: Sequence[VirtualDerivObs], params: KernelParams,
                    classification=False, lookahead_reps=1.0, **ep_kw):
    """EP fit with virtual derivative sites; returns ``(EPSites, MonotonePosterior)``.

    Regression data enter as exact Gaussian sites with variance
    ``tau^2/r + jitter*sigma^2`` (the same jitter as the plain GP), so that
    with no virtual points the result coincides with the Gaussian GP.
    Classification data (``classification=True``) enter as probit sites on
    ``sgn(y)``.
    """
    virtual = list(virtual_obs)
    n = data.n
    Xv, coords, dirs, etas = _virtual_arrays(virtual, data.dim)
    K = joint_kernel(data.X, Xv, coords, params)
    m = K.shape[0]
    fixed_tau = np.zeros(m)
    fixed_nu = np.zeros(m)
    probit_idx = list(range(n, m))
    probit_y = list(dirs)
    probit_eta = list(etas)
    if classification:
        ys = signed_responses(data.y)
        probit_idx = list(range(n)) + probit_idx
        probit_y = list(ys) + probit_y
        probit_eta = [1.0] * n + probit_eta
        data = TrainingSet(data.X, ys, data.reps)
    else:
        noise = params.tau ** 2 / data.reps + JITTER_START * params.sigma_se ** 2
        fixed_tau[:n] = 1.0 / noise
        fixed_nu[:n] = data.y / noise
    tau_t, nu_t, conv, sweeps = run_ep(K, fixed_tau, fixed_nu, np.array(probit_idx, int),
                                       np.array(probit_y, float), np.array(probit_eta, float), **ep_kw)
    post = MonotonePosterior(params, data, virtual, tau_t, nu_t, conv, sweeps,
                             classification=classification, lookahead_reps=lookahead_reps)
    return post.sites, post


def predict_monotone(state: MonotonePosterior, Xstar):
    """Posterior mean and covariance of ``f`` at ``Xstar``."""
    return state.predict_cov(Xstar)


def candidate_grid(lo, hi, feasible: Optional[Callable] = None, seed=0) -> np.ndarray:
    """``32^min(d,2)`` candidate locations: a regular grid for d <= 2,
    otherwise a 1024-point scrambled Sobol set."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    d = len(lo)
    if d <= 2:
        g = (np.arange(32) + 0.5) / 32
        U = np.stack(np.meshgrid(*([g] * d), indexing="ij"), -1).reshape(-1, d)
    else:
        U = qmc.Sobol(d, scramble=True, seed=seed).random(1024)
    P = lo + (hi - lo) * U
    if feasible is not None:
        P = P[feasible(P)]
    return P


def place_virtual_points(state: MonotonePosterior, domain, budget: int, directions: Sequence[int],
                         eta: float = None, candidates=None) -> List[VirtualDerivObs]:
    """Choose up to ``budget`` new virtual points by maximal violation probability.

    ``domain`` is ``(lo, hi)`` or ``(lo, hi, feasible)``. ``directions[j]`` is
    +1/-1 for an increasing/decreasing constraint in coordinate ``j``, 0 for
    none. Existing ``(location, coordinate)`` pairs are never repeated.
    """
    if budget <= 0:
        return []
    lo, hi = domain[0], domain[1]
    feasible = domain[2] if len(domain) > 2 else None
    P = candidate_grid(lo, hi, feasible) if candidates is None else np.atleast_2d(candidates)
    eta = eta if eta is not None else (state.virtual[0].eta if state.virtual else ETA_REL)
    taken = {v.key for v in state.virtual}
    scored = []
    for j, dj in enumerate(directions):
        if dj == 0:
            continue
        mean, var = state.predict_derivative(P, j)
        with np.errstate(divide="ignore", invalid="ignore"):
            prob = special.ndtr(-dj * mean / np.sqrt(var))
        prob = np.where(var > 0, prob, (dj * mean < 0).astype(float))
        for i in range(P.shape[0]):
            scored.append((prob[i], j, i))
    scored.sort(key=lambda t: -t[0])
    out = []
    for prob, j, i in scored:
        v = VirtualDerivObs(P[i], j, int(directions[j]), eta)
        if v.key in taken:
            continue
        taken.add(v.key)
        out.append(v)
        if len(out) >= budget:
            break
    return out


def fit_monotone_adaptive(data: TrainingSet, params: KernelParams, directions: Sequence[int], domain,
                          budget: Optional[int] = None, rounds: int = 5, classification=False,
                          eta: Optional[float] = None, lookahead_reps=1.0) -> MonotonePosterior:
    """Fit with virtual points added in ``rounds`` greedy batches (total ``budget``, default 10d)."""
    d = data.dim
    budget = 10 * d if budget is None else budget
    if eta is None:
        scale = 1.0 if classification else max(float(np.std(data.y)), 1e-12)
        eta = ETA_REL * scale
    _, post = ep_fit_monotone(data, [], params, classification, lookahead_reps)
    virtual: List[VirtualDerivObs] = []
    per_round = int(np.ceil(budget / max(rounds, 1)))
    lo, hi = domain[0], domain[1]
    feasible = domain[2] if len(domain) > 2 else None
    P = candidate_grid(lo, hi, feasible)
    while len(virtual) < budget:
        new = place_virtual_points(post, domain, min(per_round, budget - len(virtual)), directions, eta, P)
        if not new:
            break
        virtual += new
        _, post = ep_fit_monotone(data, virtual, params, classification, lookahead_reps)
    return post


def lookahead_var_monotone(state: MonotonePosterior, x_new, Xstar) -> np.ndarray:
    """Look-ahead variance with virtual sites and their EP parameters frozen."""
    from .lookahead import lookahead_variance

    return lookahead_variance(state, np.atleast_2d(x_new), Xstar)[0]
