"""Level-set quality metrics and their weighted test sets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import special, stats

from .acquisition import DomainSpec, misclassification_probability

NEAR_MASS = 0.4
NEAR_FRACTION = 0.8


@dataclass(frozen=True)
class TestSet:
    """Points with probability weights; ``near_mask`` flags the near-contour stratum."""

    points: np.ndarray
    weights: np.ndarray
    near_mask: Optional[np.ndarray] = None

    __test__ = False  # not a pytest class

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.points, float))
        w = np.asarray(self.weights, float).ravel()
        if len(w) != len(P):
            raise ValueError("one weight per point required")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-10):
            raise ValueError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "points", P)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return len(self.weights)


@dataclass(frozen=True)
class Prediction:
    """Posterior mean/sd of ``f`` (or latent ``z``) at the test points."""

    mean: np.ndarray
    sd: np.ndarray
    dof: Optional[float] = None

    @classmethod
    def of(cls, estimate, points) -> "Prediction":
        if isinstance(estimate, Prediction):
            return estimate
        mean, var = estimate.predict(points)
        return cls(np.asarray(mean), np.sqrt(np.maximum(var, 0.0)), getattr(estimate, "dof", None))


def _truth_values(truth, points):
    return np.asarray(truth(points) if callable(truth) else truth, float)


def error_rate(truth, estimate, testset: TestSet) -> float:
    """μ-mass of points where ``f >= 0`` and ``f_hat >= 0`` disagree."""
    f = _truth_values(truth, testset.points)
    fh = Prediction.of(estimate, testset.points).mean
    return float(testset.weights @ ((f >= 0) != (fh >= 0)))


def bias(truth, estimate, testset: TestSet) -> float:
    """``μ(S minus S_hat) - μ(S_hat minus S)``."""
    f = _truth_values(truth, testset.points)
    fh = Prediction.of(estimate, testset.points).mean
    missed = (fh < 0) & (f >= 0)
    spurious = (fh >= 0) & (f < 0)
    return float(testset.weights @ (missed.astype(float) - spurious))


def local_empirical_error(estimate, x) -> np.ndarray:
    """Posterior probability of misclassifying ``x``."""
    p = Prediction.of(estimate, np.atleast_2d(x))
    return misclassification_probability(p.mean, p.sd, p.dof)


def empirical_error(estimate, testset: TestSet) -> float:
    p = Prediction.of(estimate, testset.points)
    return float(testset.weights @ misclassification_probability(p.mean, p.sd, p.dof))


def _quantile(level, dof):
    return stats.norm.ppf(level) if dof is None else stats.t.ppf(level, dof)


def credible_band_volume(estimate, testset: TestSet, alpha: float = 0.05) -> float:
    """μ-mass where the sign of ``f`` is not fixed by the ``1 - alpha`` band."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    p = Prediction.of(estimate, testset.points)
    z = _quantile(1 - alpha / 2, p.dof)
    inside = (p.mean + z * p.sd) * (p.mean - z * p.sd) < 0
    return float(testset.weights @ inside)


def _prob_in_set(p: Prediction):
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(p.sd > 0, p.mean / np.where(p.sd > 0, p.sd, 1.0), np.sign(p.mean) * np.inf)
    u = np.where(np.isnan(u), 0.0, u)
    return special.ndtr(u) if p.dof is None else stats.t.cdf(u, p.dof)


def vorobev_deviation(estimate, testset: TestSet, threshold: float = 0.0) -> float:
    """Expected μ-distance between the random excursion set and
    ``S^z = {f_hat - z s >= 0}``, ``z = threshold`` (the ``1 - alpha/2`` quantile).

    ``threshold = 0`` reproduces :func:`empirical_error`.
    """
    p = Prediction.of(estimate, testset.points)
    pv = _prob_in_set(p)
    in_set = p.mean - threshold * p.sd >= 0
    return float(testset.weights @ np.where(in_set, 1.0 - pv, pv))


def alpha_to_threshold(alpha, dof=None) -> float:
    """``z_{1-alpha/2}``; alpha in (0, 2) so that negative thresholds are reachable."""
    return float(_quantile(1 - alpha / 2, dof))


def threshold_to_alpha(z, dof=None) -> float:
    cdf = stats.norm.cdf(z) if dof is None else stats.t.cdf(z, dof)
    return float(2 * (1 - cdf))


def vorobev_threshold(estimate, testset: TestSet, tol: float = 1e-4, bracket=(-10.0, 10.0)) -> float:
    """Threshold ``z*`` with ``μ(S^{z*}) = ∫ p_V dμ``, found by bisection to ``tol``."""
    p = Prediction.of(estimate, testset.points)
    pv = _prob_in_set(p)
    if np.ptp(pv) == 0:
        raise ValueError("coverage probability is constant; Vorob'ev threshold undefined")
    target = float(testset.weights @ pv)

    def excess(z):
        return float(testset.weights @ (p.mean - z * p.sd >= 0)) - target

    lo, hi = bracket
    # excess is nonincreasing in z
    if excess(lo) < 0:
        return lo
    if excess(hi) > 0:
        return hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if excess(mid) >= 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def plain_test_set(points) -> TestSet:
    P = np.atleast_2d(points)
    return TestSet(P, np.full(len(P), 1.0 / len(P)))


def grid_test_set_1d(lo=0.0, hi=1.0, M=1000) -> TestSet:
    return plain_test_set(np.linspace(lo, hi, M)[:, None])


def build_test_set(truth: Callable, domain: DomainSpec, M: int, stratified: bool = True,
                   seed=None, range_f: Optional[float] = None, pool_size: int = 2 ** 15,
                   near_radius: Optional[float] = None) -> TestSet:
    """Test set subsampled from a scrambled Sobol pool.

    Stratified mode puts ``0.8 M`` points in the near-contour stratum
    ``D1 = {|f| <= c}`` with total mass 0.4, the rest (mass 0.6) elsewhere.
    By default ``c`` is the 0.4-quantile of ``|f|`` over the pool, so that
    ``D1`` occupies 40% of the domain and the weighted sum is an unbiased
    estimate of the uniform integral; ``near_radius`` instead fixes
    ``c = near_radius * R_f``. ``truth`` may be the true function or a fitted mean.
    """
    if M < 100:
        raise ValueError("test sets need at least 100 points")
    rng = np.random.default_rng(seed)
    pool = domain.sobol(max(pool_size, 4 * M), seed=rng.integers(2 ** 31))
    if not stratified:
        return plain_test_set(pool[rng.choice(len(pool), M, replace=False)])
    f = np.asarray(truth(pool), float)
    if near_radius is None:
        c = np.quantile(np.abs(f), NEAR_MASS)
    else:
        c = near_radius * (float(np.ptp(f)) if range_f is None else range_f)
    near = np.abs(f) <= c
    M1 = int(round(NEAR_FRACTION * M))
    M2 = M - M1
    if near.sum() < M1 or (~near).sum() < M2:
        return plain_test_set(pool[rng.choice(len(pool), M, replace=False)])
    i1 = rng.choice(np.flatnonzero(near), M1, replace=False)
    i2 = rng.choice(np.flatnonzero(~near), M2, replace=False)
    pts = np.vstack([pool[i1], pool[i2]])
    w = np.r_[np.full(M1, NEAR_MASS / M1), np.full(M2, (1 - NEAR_MASS) / M2)]
    mask = np.r_[np.ones(M1, bool), np.zeros(M2, bool)]
    return TestSet(pts, w, mask)
