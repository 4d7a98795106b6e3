"""Contour-finding acquisition functions and the genetic optimizer that picks
the next input."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special, stats
from scipy.stats import qmc

from .lookahead import lookahead_variance_self

logger = logging.getLogger(__name__)

KINDS = ("mcu", "tmse", "csur", "icu", "mee")
GAMMA_FLOOR = 0.1
REFERENCE_SIZE = 1024


@dataclass(frozen=True)
class DomainSpec:
    """Box ``[lo, hi]`` intersected with ``A x <= b`` and an optional predicate."""

    lo: tuple
    hi: tuple
    A: Optional[tuple] = None
    b: Optional[tuple] = None
    predicate: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        if len(lo) != len(hi) or any(h <= l for l, h in zip(lo, hi)):
            raise ValueError(f"invalid box {lo}, {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if self.A is not None:
            A = np.atleast_2d(np.asarray(self.A, float))
            b = np.atleast_1d(np.asarray(self.b, float))
            if A.shape != (b.shape[0], len(lo)):
                raise ValueError("linear constraint shapes do not match the box")
            object.__setattr__(self, "A", tuple(map(tuple, A)))
            object.__setattr__(self, "b", tuple(b))

    @property
    def dim(self) -> int:
        return len(self.lo)

    @property
    def lo_arr(self):
        return np.asarray(self.lo)

    @property
    def hi_arr(self):
        return np.asarray(self.hi)

    def feasible(self, X, atol=1e-12) -> np.ndarray:
        X = np.atleast_2d(X)
        ok = np.all((X >= self.lo_arr - atol) & (X <= self.hi_arr + atol), axis=1)
        if self.A is not None:
            ok &= np.all(X @ np.asarray(self.A).T <= np.asarray(self.b) + atol, axis=1)
        if self.predicate is not None:
            ok &= np.asarray(self.predicate(X), bool)
        return ok

    def from_unit(self, U):
        return self.lo_arr + (self.hi_arr - self.lo_arr) * U

    def to_unit(self, X):
        return (np.atleast_2d(X) - self.lo_arr) / (self.hi_arr - self.lo_arr)

    def sobol(self, n, seed=None, max_draws=64) -> np.ndarray:
        """``n`` feasible points from a scrambled Sobol sequence (rejection)."""
        eng = qmc.Sobol(self.dim, scramble=True, seed=seed)
        out = []
        total = 0
        for _ in range(max_draws):
            m = int(2 ** np.ceil(np.log2(max(n, 2))))
            P = self.from_unit(eng.random(m))
            P = P[self.feasible(P)]
            out.append(P)
            total += len(P)
            if total >= n:
                break
        P = np.vstack(out)
        if len(P) == 0:
            raise ValueError("domain appears infeasible: no Sobol point satisfies the constraints")
        return P[:n]


@dataclass
class AcquisitionSpec:
    """Criterion, its parameters and the weighting measure.

    ``gamma`` is a fixed MCU weight or None for the adaptive recipe.
    ``icu_grid``/``icu_weights`` give the sum in ICU (weights are normalised).
    ``measure`` is a density μ(x) multiplying the score (None = uniform).
    """

    kind: str = "tmse"
    gamma: Optional[float] = None
    gamma_floor: float = GAMMA_FLOOR
    icu_grid: Optional[np.ndarray] = None
    icu_weights: Optional[np.ndarray] = None
    measure: Optional[Callable] = None
    population: int = 50
    generations: int = 200
    tol: float = 1e-3
    stall: int = 20

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"unknown acquisition {self.kind!r}; choose from {KINDS}")
        if self.gamma is not None and not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.kind == "icu":
            if self.icu_grid is None or len(self.icu_grid) == 0:
                raise ValueError("ICU needs a nonempty grid")
            self.icu_grid = np.atleast_2d(np.asarray(self.icu_grid, float))
            w = np.ones(len(self.icu_grid)) if self.icu_weights is None else np.asarray(self.icu_weights, float)
            if np.any(w < 0) or w.sum() <= 0:
                raise ValueError("ICU weights must be nonnegative with positive sum")
            self.icu_weights = w / w.sum()


# ---------------------------------------------------------------- pointwise pieces

def misclassification_probability(mean, sd, dof=None) -> np.ndarray:
    """``Phi(-|m|/s)`` (Student-t survival when ``dof`` is given); s=0 taken as a limit."""
    mean = np.abs(np.asarray(mean, float))
    sd = np.asarray(sd, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(sd > 0, mean / np.where(sd > 0, sd, 1.0), np.where(mean > 0, np.inf, 0.0))
    if dof is None:
        return special.ndtr(-u)
    return stats.t.sf(u, dof)


def _mean_sd(surrogate, X):
    mean, var = surrogate.predict(np.atleast_2d(X))
    return mean, np.sqrt(var)


def mcu(surrogate, x, gamma) -> np.ndarray:
    """``-|f_hat| + gamma * s``."""
    m, s = _mean_sd(surrogate, x)
    return -np.abs(m) + gamma * s


def adaptive_gamma(surrogate, grid, floor=GAMMA_FLOOR) -> float:
    """``IQR(f_hat) / (3 * mean(s))`` over ``grid``, floored at ``floor``."""
    m, s = _mean_sd(surrogate, grid)
    return gamma_from_moments(m, s, floor)


def gamma_from_moments(m, s, floor=GAMMA_FLOOR) -> float:
    ave = float(np.mean(s))
    if not ave > 0:
        raise ZeroDivisionError("average posterior sd is zero")
    q75, q25 = np.percentile(m, [75, 25])
    return max(float(q75 - q25) / (3.0 * ave), floor)


def mee(surrogate, x) -> np.ndarray:
    """Local misclassification probability. Not recommended as a design criterion:
    it is maximal (1/2) all along the estimated contour, so it cannot rank those points."""
    m, s = _mean_sd(surrogate, x)
    return misclassification_probability(m, s, getattr(surrogate, "dof", None))


def csur(surrogate, x) -> np.ndarray:
    """Reduction of the local misclassification probability from sampling at ``x``."""
    x = np.atleast_2d(x)
    m, s = _mean_sd(surrogate, x)
    s_next = np.sqrt(lookahead_variance_self(surrogate, x))
    dof = getattr(surrogate, "dof", None)
    out = misclassification_probability(m, s, dof) - misclassification_probability(m, s_next, dof)
    return np.maximum(out, 0.0)


def icu(surrogate, x, icu_grid, weights=None) -> np.ndarray:
    """``-sum_m Phi(-|f_hat(x_m)| / s_hat_{n+1}(x_m)) mu_m`` for each candidate row."""
    grid = np.atleast_2d(icu_grid)
    w = np.full(len(grid), 1.0 / len(grid)) if weights is None else np.asarray(weights) / np.sum(weights)
    return _IcuCache(surrogate, grid, w).score(np.atleast_2d(x))


def tmse(surrogate, x) -> np.ndarray:
    """``s^2 * N(0; f_hat, s^2)`` with zero nugget, i.e. ``s * phi(f_hat / s)``."""
    m, s = _mean_sd(surrogate, x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(s > 0, s * stats.norm.pdf(m / np.where(s > 0, s, 1.0)), 0.0)
    return out


class _IcuCache:
    """Grid-side quantities reused across all candidates of one step."""

    def __init__(self, surrogate, grid, weights):
        self.post = surrogate
        self.grid = grid
        self.w = weights
        self.dof = getattr(surrogate, "dof", None)
        self.mean_abs = np.abs(surrogate.predict(grid)[0])
        _, Vg = surrogate._half(grid)
        self.Vg = Vg
        self.var_g = np.maximum(surrogate._prior_var(grid) - np.einsum("ij,ij->j", Vg, Vg), 0.0)
        self.factor = surrogate.lookahead_factor()
        self.current = float(self.w @ misclassification_probability(
            self.mean_abs, np.sqrt(self.factor_now() * self.var_g), self.dof))

    def factor_now(self):
        # current (not look-ahead) TP inflation, 1 for the others
        return getattr(self.post, "inflation", 1.0)

    def score(self, Xc, chunk=64):
        from .gp_core import kernel_matrix

        out = np.empty(len(Xc))
        for start in range(0, len(Xc), chunk):
            X = Xc[start : start + chunk]
            _, Vc = self.post._half(X)
            var_c = np.maximum(self.post._prior_var(X) - np.einsum("ij,ij->j", Vc, Vc), 0.0)
            cross = kernel_matrix(X, self.post.params, self.grid) - Vc.T @ self.Vg  # k x M
            noise = self.post.lookahead_noise(X)
            la = self.var_g[None, :] - cross ** 2 / (noise + var_c)[:, None]
            sd = np.sqrt(self.factor * np.maximum(la, 0.0))
            out[start : start + chunk] = -(misclassification_probability(self.mean_abs[None, :], sd, self.dof) @ self.w)
        return out


# ---------------------------------------------------------------- scorer + optimizer

class Scorer:
    """Vectorised acquisition ``I_n(x) * mu(x)`` for one surrogate state.

    ICU is reported as the reduction ``E_n - sum ...``. When a non-uniform
    measure is used, MCU is also shifted by its minimum over the reference
    sample so that both are nonnegative before multiplication.
    """

    def __init__(self, spec: AcquisitionSpec, surrogate, reference=None, gamma_grid=None):
        self.spec = spec
        self.post = surrogate
        self.gamma = spec.gamma
        self.shift = 0.0
        self.icu_cache = None
        if spec.kind == "mcu" and self.gamma is None:
            grid = gamma_grid if gamma_grid is not None else reference
            self.gamma = adaptive_gamma(surrogate, grid, spec.gamma_floor)
        if spec.kind == "icu":
            # scored as the reduction E_n - E_{n+1}: same argmax, but the optimizer's
            # relative stopping rule then acts on the reduction, not on E itself
            self.icu_cache = _IcuCache(surrogate, spec.icu_grid, spec.icu_weights)
            self.shift = self.icu_cache.current
        if spec.kind == "mcu" and spec.measure is not None and reference is not None:
            self.shift = -float(np.min(self.raw(reference)))

    def raw(self, X):
        k = self.spec.kind
        if k == "mcu":
            return mcu(self.post, X, self.gamma)
        if k == "tmse":
            return tmse(self.post, X)
        if k == "mee":
            return mee(self.post, X)
        if k == "csur":
            return csur(self.post, X)
        return self.icu_cache.score(np.atleast_2d(X))

    def __call__(self, X):
        X = np.atleast_2d(X)
        score = self.raw(X)
        if self.spec.kind == "icu" and self.spec.measure is None:
            return score + self.shift
        if self.spec.measure is not None:
            score = np.maximum(score + self.shift, 0.0) * np.asarray(self.spec.measure(X), float)
        return score


@dataclass
class OptimResult:
    x: np.ndarray
    score: float
    generations: int
    evaluations: int
    reference_best: float


def genetic_maximize(fun: Callable, domain: DomainSpec, rng, population=50, generations=200,
                     tol=1e-3, stall=20, reference_size=REFERENCE_SIZE, reference=None) -> OptimResult:
    """Real-coded GA seeded from a quasi-random reference sample.

    Elitism (2), binary tournaments, blend (BLX-0.5) crossover and Gaussian
    mutation; infeasible offspring receive score ``-inf``. Stops after
    ``generations``, or once the best score has improved by less than
    ``tol`` (relative) over ``stall`` generations.
    """
    rng = np.random.default_rng(rng)
    if reference is None:
        reference = domain.sobol(reference_size, seed=rng.integers(2 ** 31))
    ref_scores = np.asarray(fun(reference), float)
    n_eval = len(reference)
    order = np.argsort(-ref_scores)
    pop = reference[order[:population]].copy()
    fit = ref_scores[order[:population]].copy()
    if len(pop) < population:
        extra = reference[rng.integers(len(reference), size=population - len(pop))]
        pop = np.vstack([pop, extra])
        fit = np.r_[fit, fun(extra)]
    ref_best = float(ref_scores[order[0]])
    lo, hi = domain.lo_arr, domain.hi_arr
    span = hi - lo
    d = domain.dim
    history = [float(fit.max())]
    gen = 0
    for gen in range(1, generations + 1):
        elite_idx = np.argsort(-fit)[:2]
        n_child = population - len(elite_idx)
        # tournaments
        a = rng.integers(population, size=(n_child, 2))
        b = rng.integers(population, size=(n_child, 2))
        pa = np.where(fit[a[:, 0]] >= fit[a[:, 1]], a[:, 0], a[:, 1])
        pb = np.where(fit[b[:, 0]] >= fit[b[:, 1]], b[:, 0], b[:, 1])
        P1, P2 = pop[pa], pop[pb]
        cross = rng.random(n_child) < 0.8
        lo_b = np.minimum(P1, P2)
        hi_b = np.maximum(P1, P2)
        ext = 0.5 * (hi_b - lo_b)
        child = np.where(cross[:, None], lo_b - ext + (hi_b - lo_b + 2 * ext) * rng.random((n_child, d)), P1)
        mutate = rng.random((n_child, d)) < 0.1
        scale = 0.1 * span * (1.0 - 0.9 * gen / generations)
        child = child + mutate * rng.standard_normal((n_child, d)) * scale
        child = np.clip(child, lo, hi)
        ok = domain.feasible(child)
        child_fit = np.full(n_child, -np.inf)
        if ok.any():
            child_fit[ok] = fun(child[ok])
            n_eval += int(ok.sum())
        pop = np.vstack([pop[elite_idx], child])
        fit = np.r_[fit[elite_idx], child_fit]
        history.append(float(fit.max()))
        if len(history) > stall:
            old = history[-stall - 1]
            if history[-1] - old <= tol * max(abs(history[-1]), 1e-300):
                break
    i = int(np.argmax(fit))
    x_best, f_best = pop[i], float(fit[i])
    if ref_best > f_best:  # elitism makes this unreachable; kept as a guard
        x_best, f_best = reference[order[0]], ref_best
    return OptimResult(x_best.copy(), f_best, gen, n_eval, ref_best)


def optimize_acquisition(spec: AcquisitionSpec, surrogate, domain: DomainSpec, rng=None,
                         gamma_grid=None, return_result=False):
    """Maximise ``I_n(x) mu(x)`` over the feasible domain."""
    rng = np.random.default_rng(rng)
    reference = domain.sobol(REFERENCE_SIZE, seed=rng.integers(2 ** 31))
    scorer = Scorer(spec, surrogate, reference, gamma_grid)
    res = genetic_maximize(scorer, domain, rng, spec.population, spec.generations, spec.tol,
                           spec.stall, reference=reference)
    return res if return_result else res.x
