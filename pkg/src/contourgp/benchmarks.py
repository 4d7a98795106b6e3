"""Synthetic level-set benchmarks: response surfaces, noise models, initial
designs, the sequential design loop and the macro-replication harness."""
from __future__ import annotations

import logging
import os
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from . import metrics
from .acquisition import AcquisitionSpec, DomainSpec, optimize_acquisition
from .gp_core import FitError, KernelParams, TrainingSet, fit_gaussian_gp, update_gaussian, build_gaussian_posterior
from .mono_gp import ep_fit_monotone, fit_monotone_adaptive
from .robust_models import (
    clgp_posterior,
    fit_clgp,
    fit_tgp,
    fit_tp,
    signed_responses,
    tgp_posterior,
    tp_posterior,
)

logger = logging.getLogger(__name__)

SURROGATES = ("gp", "tgp", "tp", "clgp", "mgp", "mclgp")
NOISES = ("t_small", "t_large", "gsn_mix", "t_hetero")
WORKERS_ENV = "CONTOURGP_WORKERS"

# ---------------------------------------------------------------- test functions

HARTMAN_C = np.array([0.2, 0.22, 0.28, 0.3])
HARTMAN_A = np.array([
    [8.00, 0.50, 3.00, 10.00],
    [3.00, 8.00, 3.50, 6.00],
    [10.00, 10.00, 1.70, 0.50],
    [3.50, 1.00, 8.00, 8.00],
    [1.70, 6.00, 10.00, 1.00],
    [6.00, 9.00, 6.00, 9.00],
])
HARTMAN_P = 1e-4 * np.array([
    [1312, 2329, 2348, 4047],
    [1696, 4135, 1451, 8828],
    [5569, 8307, 3522, 8732],
    [124, 3736, 2883, 5743],
    [8283, 1004, 3047, 1091],
    [5886, 9991, 6650, 381],
])


def quadratic1d(X):
    x = np.atleast_2d(X)[:, 0]
    return (x + 0.75) * (x - 0.75)


def braninhoo2d(X):
    X = np.atleast_2d(X)
    x1 = 15.0 * X[:, 0]
    x2 = 15.0 * X[:, 1] - 5.0
    core = x1 - 5.1 * x2 ** 2 / (4 * np.pi ** 2) + 5 * x2 / np.pi - 20.0
    return (core ** 2 + (10 - 10 / (8 * np.pi)) * np.cos(x1) - 181.47) / 178.0


def hartman6(X):
    X = np.atleast_2d(X)
    # sum_j a_ji (x^j - p_ji)^2 for each point and i
    inner = np.einsum("ji,mji->mi", HARTMAN_A, (X[:, :, None] - HARTMAN_P[None, :, :]) ** 2)
    return -(np.exp(-inner) @ HARTMAN_C - 0.1) / 0.1


FUNCTIONS: Dict[str, tuple] = {
    "quadratic1d": (quadratic1d, 1),
    "braninhoo2d": (braninhoo2d, 2),
    "hartman6": (hartman6, 6),
}
# monotone directions used by the monotone surrogates (0 = unconstrained);
# the Branin-Hoo formula as written decreases in x^1 (the squared term dominates)
MONOTONE_DIRECTIONS = {"quadratic1d": (1,), "braninhoo2d": (-1, 0)}


@dataclass(frozen=True)
class SyntheticFunction:
    name: str

    def __post_init__(self):
        if self.name not in FUNCTIONS:
            raise ValueError(f"unknown function {self.name!r}; choose from {sorted(FUNCTIONS)}")

    @property
    def dim(self) -> int:
        return FUNCTIONS[self.name][1]

    def __call__(self, X):
        return eval_synthetic(self.name, X)

    @property
    def range(self) -> float:
        return response_range(self.name)


def eval_synthetic(name: str, x) -> np.ndarray:
    """Evaluate a benchmark surface on rows of ``x`` (inputs in the unit cube)."""
    fn, d = FUNCTIONS[name]
    X = np.atleast_2d(np.asarray(x, float))
    if d == 1 and X.shape[0] == 1 and X.shape[1] > 1:
        X = X.T
    if X.shape[1] != d:
        raise ValueError(f"{name} expects {d} inputs, got {X.shape[1]}")
    if np.any(X < -1e-12) or np.any(X > 1 + 1e-12):
        raise ValueError(f"{name} is defined on [0,1]^{d}")
    return fn(X)


@lru_cache(maxsize=None)
def response_range(name: str, n: int = 100_000) -> float:
    """``max f - min f`` over a scrambled Sobol sample (fixed seed)."""
    d = FUNCTIONS[name][1]
    P = sobol_points(d, n, 12345)
    f = eval_synthetic(name, P)
    return float(f.max() - f.min())


def sobol_points(d: int, n: int, seed=None) -> np.ndarray:
    """First ``n`` points of a scrambled Sobol sequence (drawn in a power-of-2 block)."""
    m = int(np.ceil(np.log2(max(n, 2))))
    return qmc.Sobol(d, scramble=True, seed=seed).random_base2(m)[:n]


# ---------------------------------------------------------------- noise

def _t_scaled(rng, dof, sd, size):
    """Student-t draws with standard deviation ``sd`` (scale ``sd*sqrt((dof-2)/dof)``)."""
    dof = np.asarray(dof, float)
    return rng.standard_t(dof, size) * sd * np.sqrt((dof - 2.0) / dof)


def t_scale_factor(dof, t_param: str):
    """Multiplier turning the printed t parameter into a standard deviation."""
    if t_param == "sd":
        return np.ones_like(np.asarray(dof, float))
    return np.sqrt(np.asarray(dof, float) / (np.asarray(dof, float) - 2.0))


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    range_f: float = 1.0
    t_param: str = "sd"

    def __post_init__(self):
        if self.kind not in NOISES:
            raise ValueError(f"unknown noise {self.kind!r}; choose from {NOISES}")
        if self.t_param not in ("sd", "scale"):
            raise ValueError("t_param must be 'sd' or 'scale'")

    def printed(self, X):
        """Degrees of freedom (inf for Gaussian) and the printed spread
        parameter of the Student-t settings at each row of ``X``."""
        X = np.atleast_2d(X)
        m = X.shape[0]
        R = self.range_f
        if self.kind == "t_small":
            return np.full(m, 3.0), np.full(m, 0.1 * R)
        if self.kind == "t_large":
            return np.full(m, 3.0), np.full(m, 0.5 * R)
        if self.kind == "t_hetero":
            x1 = X[:, 0]
            return np.maximum(6.0 - 4.0 * x1, 2.1), 0.4 * (4.0 * x1 + 1.0)
        return np.full(m, np.inf), np.full(m, np.sqrt(0.625) * R)

    def dof_sd(self, X):
        """Degrees of freedom and standard deviation at each row of ``X``."""
        dof, par = self.printed(X)
        if self.kind == "gsn_mix":
            return dof, par
        return dof, par * t_scale_factor(dof, self.t_param)

    def sample(self, X, rng) -> np.ndarray:
        X = np.atleast_2d(X)
        m = X.shape[0]
        if self.kind == "gsn_mix":
            sd = np.where(rng.random(m) < 0.5, 0.5, 1.0) * self.range_f
            return sd * rng.standard_normal(m)
        dof, sd = self.dof_sd(X)
        return _t_scaled(rng, dof, sd, m)


def sample_noise(spec: NoiseSpec, x, rng) -> np.ndarray:
    return spec.sample(x, rng)


# ---------------------------------------------------------------- designs

def lhs_design(n0: int, domain, rng) -> np.ndarray:
    """Latin hypercube of ``n0`` points in the box of ``domain`` (a DomainSpec or dimension)."""
    if n0 < 1:
        raise ValueError("n0 must be positive")
    if isinstance(domain, (int, np.integer)):
        domain = DomainSpec([0.0] * int(domain), [1.0] * int(domain))
    rng = np.random.default_rng(rng)
    U = qmc.LatinHypercube(domain.dim, seed=rng).random(n0)
    return domain.from_unit(U)


def refit_steps(n0: int, N: int) -> List[int]:
    """Sample sizes at which hyperparameters are re-estimated: n0+1, n0+2, n0+4, ..."""
    out = []
    k = 1
    while n0 + k <= N:
        out.append(n0 + k)
        k *= 2
    return out


# ---------------------------------------------------------------- surrogate factory

@dataclass
class SurrogateSettings:
    kind: str = "gp"
    restarts: int = 3
    monotone_directions: Optional[Sequence[int]] = None
    virtual_budget: Optional[int] = None
    lookahead_reps: float = 1.0

    def __post_init__(self):
        if self.kind not in SURROGATES:
            raise ValueError(f"unknown surrogate {self.kind!r}; choose from {SURROGATES}")


def fit_surrogate(settings: SurrogateSettings, data: TrainingSet, rng, previous=None, domain=None):
    """ML fit of the requested surrogate, warm-started from ``previous`` params."""
    init = () if previous is None else (previous.params,)
    kind = settings.kind
    la = dict(lookahead_reps=settings.lookahead_reps)
    if kind == "gp":
        return fit_gaussian_gp(data, restarts=settings.restarts, rng=rng, init=init, **la)
    if kind == "tgp":
        return fit_tgp(data, restarts=settings.restarts, rng=rng, init=init, **la)
    if kind == "tp":
        return fit_tp(data, restarts=settings.restarts, rng=rng, init=init, **la)
    if kind == "clgp":
        return fit_clgp(data, restarts=settings.restarts, rng=rng, init=init)
    dirs = settings.monotone_directions
    if dirs is None:
        raise ValueError("monotone surrogates need monotone_directions")
    dom = _mono_domain(domain, data.dim)
    if kind == "mgp":
        base = fit_gaussian_gp(data, restarts=settings.restarts, rng=rng, init=init, **la)
        return fit_monotone_adaptive(data, base.params, dirs, dom, settings.virtual_budget, **la)
    base = fit_clgp(data, restarts=settings.restarts, rng=rng, init=init)
    return fit_monotone_adaptive(data, base.params, dirs, dom, settings.virtual_budget, classification=True)


def _mono_domain(domain, d):
    if domain is None:
        return (np.zeros(d), np.ones(d))
    return (domain.lo_arr, domain.hi_arr, domain.feasible)


def condition_surrogate(settings: SurrogateSettings, post, data: TrainingSet, x_new=None, y_new=None, rep=1.0):
    """Posterior on ``data`` with the hyperparameters of ``post`` frozen."""
    kind = settings.kind
    p = post.params
    if kind == "gp":
        if x_new is not None and post.data.n == data.n - 1:
            return update_gaussian(post, x_new, y_new, rep)
        return build_gaussian_posterior(p, data, lookahead_reps=settings.lookahead_reps)
    if kind == "tgp":
        a0 = np.r_[post.state.a, np.zeros(data.n - post.data.n)] if data.n >= post.data.n else None
        try:
            return tgp_posterior(data, p, a0=a0, lookahead_reps=settings.lookahead_reps)
        except FitError:
            return tgp_posterior(data, p, lookahead_reps=settings.lookahead_reps)
    if kind == "tp":
        return tp_posterior(data, p, settings.lookahead_reps)
    if kind == "clgp":
        signed = TrainingSet(data.X, signed_responses(data.y), data.reps)
        a0 = np.r_[post.state.a, np.zeros(data.n - post.data.n)]
        return clgp_posterior(signed, p, a0)
    # monotone: keep the virtual points placed at the last refit
    _, new = ep_fit_monotone(data, post.virtual, p, classification=(kind == "mclgp"),
                             lookahead_reps=settings.lookahead_reps)
    return new


# ---------------------------------------------------------------- experiment

@dataclass
class ExperimentConfig:
    """One synthetic experiment (function x noise x surrogate x criterion)."""

    function: str = "quadratic1d"
    noise: str = "t_small"
    surrogate: str = "gp"
    acquisition: str = "tmse"
    budget: Optional[int] = None
    n0: Optional[int] = None
    test_size: Optional[int] = None
    runs: int = 20
    seed: int = 2018
    gamma: Optional[float] = None
    icu_grid: str = "testset"
    icu_grid_size: Optional[int] = None
    restarts: int = 3
    virtual_budget: Optional[int] = None
    ga_population: int = 50
    ga_generations: int = 200
    range_f: Optional[float] = 1.0  # None: empirical max f - min f
    t_param: str = "sd"

    DEFAULT_BUDGET = {1: 100, 2: 150, 6: 1000}
    DEFAULT_TEST = {1: 1000, 2: 500, 6: 1000}

    def __post_init__(self):
        SyntheticFunction(self.function)
        NoiseSpec(self.noise, 1.0, self.t_param)
        SurrogateSettings(self.surrogate)
        AcquisitionSpec(self.acquisition, icu_grid=np.zeros((1, 1)) if self.acquisition == "icu" else None)
        d = self.dim
        if self.n0 is None:
            self.n0 = 10 * d
        if self.budget is None:
            self.budget = self.DEFAULT_BUDGET.get(d, 100 * d)
        if self.test_size is None:
            self.test_size = self.DEFAULT_TEST.get(d, 1000)
        if self.icu_grid not in ("testset", "sobol"):
            raise ValueError("icu_grid must be 'testset' or 'sobol'")
        if self.icu_grid_size is None:
            self.icu_grid_size = 200 if d == 1 else 500
        if not 1 <= self.n0 <= self.budget:
            raise ValueError(f"need 1 <= n0 <= budget, got n0={self.n0}, budget={self.budget}")
        if self.runs < 1:
            raise ValueError("runs must be positive")
        if self.surrogate in ("mgp", "mclgp") and self.function not in MONOTONE_DIRECTIONS:
            raise ValueError(f"{self.function} has no monotone structure for {self.surrogate}")

    @property
    def dim(self) -> int:
        return FUNCTIONS[self.function][1]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    n: int
    er: float
    ee: float
    bias: float
    ci: float
    x: list
    y: float
    refit: bool
    wall: float


@dataclass
class RunResult:
    run: int
    steps: List[StepRecord]
    aborted: bool = False
    message: str = ""
    final_params: Optional[dict] = None
    surrogate: object = field(default=None, repr=False, compare=False)  # last fitted state

    @property
    def final(self) -> StepRecord:
        return self.steps[-1]


def run_seeds(master_seed: int, runs: int) -> List[np.random.SeedSequence]:
    return np.random.SeedSequence(master_seed).spawn(runs)


def run_streams(seq: np.random.SeedSequence) -> dict:
    """Independent generators for one macro-run, shared by every scheme."""
    names = ("design", "noise", "testset", "optimizer", "fit")
    return {k: np.random.default_rng(s) for k, s in zip(names, seq.spawn(len(names)))}


def _params_dict(p):
    return {"sigma_se": float(p.sigma_se), "theta": list(map(float, p.theta)), "tau": float(p.tau),
            "nu": None if p.nu is None else float(p.nu)}


def make_test_set(cfg: ExperimentConfig, rng) -> metrics.TestSet:
    f = SyntheticFunction(cfg.function)
    if cfg.dim == 1:
        return metrics.grid_test_set_1d(0.0, 1.0, cfg.test_size)
    dom = DomainSpec([0.0] * cfg.dim, [1.0] * cfg.dim)
    return metrics.build_test_set(f, dom, cfg.test_size, stratified=True, seed=rng, range_f=noise_range(cfg))


def noise_range(cfg: ExperimentConfig) -> float:
    """``R_f`` scaling the noise and the near-contour band."""
    return response_range(cfg.function) if cfg.range_f is None else float(cfg.range_f)


def run_sequential(cfg: ExperimentConfig, run_index: int = 0, seed_seq=None, callback=None) -> RunResult:
    """One macro-run: LHS initial design, then the acquire/sample/update loop to ``budget``."""
    seed_seq = seed_seq if seed_seq is not None else run_seeds(cfg.seed, run_index + 1)[run_index]
    rs = run_streams(seed_seq)
    f = SyntheticFunction(cfg.function)
    noise = NoiseSpec(cfg.noise, noise_range(cfg), cfg.t_param)
    d = cfg.dim
    domain = DomainSpec([0.0] * d, [1.0] * d)
    testset = make_test_set(cfg, rs["testset"])
    f_test = f(testset.points)
    settings = SurrogateSettings(cfg.surrogate, cfg.restarts, MONOTONE_DIRECTIONS.get(cfg.function),
                                 cfg.virtual_budget)
    icu_grid = icu_w = None
    if cfg.acquisition == "icu":
        # the ICU sum is the empirical error on the run's test set, or on a separate uniform grid
        if cfg.icu_grid == "testset":
            icu_grid, icu_w = testset.points, testset.weights
        else:
            icu_grid = (np.linspace(0, 1, cfg.icu_grid_size)[:, None] if d == 1
                        else sobol_points(d, cfg.icu_grid_size, rs["testset"]))
    spec = AcquisitionSpec(cfg.acquisition, gamma=cfg.gamma, icu_grid=icu_grid, icu_weights=icu_w,
                           population=cfg.ga_population, generations=cfg.ga_generations)

    X = lhs_design(cfg.n0, domain, rs["design"])
    y = f(X) + noise.sample(X, rs["noise"])
    data = TrainingSet(X, y)
    refits = set(refit_steps(cfg.n0, cfg.budget))
    steps: List[StepRecord] = []
    t0 = time.perf_counter()

    def record(post, n, xn, yn, refit):
        pred = metrics.Prediction.of(post, testset.points)
        steps.append(StepRecord(
            n=n,
            er=metrics.error_rate(f_test, pred, testset),
            ee=metrics.empirical_error(pred, testset),
            bias=metrics.bias(f_test, pred, testset),
            ci=metrics.credible_band_volume(pred, testset, 0.05),
            x=[float(v) for v in np.ravel(xn)] if xn is not None else None,
            y=float(yn) if yn is not None else None,
            refit=refit,
            wall=time.perf_counter() - t0,
        ))
        if callback is not None:
            callback(steps[-1])

    try:
        post = _robust_fit(settings, data, rs["fit"], None, domain)
    except FitError as exc:
        return RunResult(run_index, steps, True, f"initial fit failed: {exc}")
    record(post, data.n, None, None, True)
    gamma_grid = testset.points if cfg.acquisition == "mcu" else None
    while data.n < cfg.budget:
        x_next = optimize_acquisition(spec, post, domain, rs["optimizer"], gamma_grid=gamma_grid)
        y_next = float(f(x_next[None, :])[0] + noise.sample(x_next[None, :], rs["noise"])[0])
        data = data.append(x_next, y_next)
        refit = data.n in refits
        try:
            if refit:
                post = _robust_fit(settings, data, rs["fit"], post, domain)
            else:
                post = condition_surrogate(settings, post, data, x_next, y_next)
        except FitError as exc:
            logger.warning("run %d aborted at n=%d: %s", run_index, data.n, exc)
            return RunResult(run_index, steps, True, str(exc), _params_dict(post.params))
        record(post, data.n, x_next, y_next, refit)
    return RunResult(run_index, steps, False, "", _params_dict(post.params), post)


def _robust_fit(settings, data, rng, previous, domain):
    """Fit; on failure retry once with more random restarts and no warm start."""
    try:
        return fit_surrogate(settings, data, rng, previous, domain)
    except FitError as exc:
        logger.info("fit failed (%s); retrying with fresh restarts", exc)
        retry = SurrogateSettings(settings.kind, settings.restarts + 3, settings.monotone_directions,
                                  settings.virtual_budget, settings.lookahead_reps)
        return fit_surrogate(retry, data, rng, None, domain)


def initial_design(cfg: ExperimentConfig, run_index: int) -> np.ndarray:
    """The LHS design of macro-run ``run_index`` (identical for every surrogate/criterion)."""
    rs = run_streams(run_seeds(cfg.seed, run_index + 1)[run_index])
    d = cfg.dim
    return lhs_design(cfg.n0, DomainSpec([0.0] * d, [1.0] * d), rs["design"])


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def macroreplicate(cfg: ExperimentConfig, runs: Optional[int] = None, workers: Optional[int] = None) -> dict:
    """Independent macro-runs with seeds spawned from ``cfg.seed``.

    Run ``k`` uses the same seed stream, hence the same initial design and
    test set, for every surrogate/criterion combination.
    """
    runs = cfg.runs if runs is None else runs
    workers = default_workers() if workers is None else workers
    seqs = run_seeds(cfg.seed, runs)
    if workers > 1 and runs > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=workers)(delayed(run_sequential)(cfg, k, seqs[k]) for k in range(runs))
    else:
        results = [run_sequential(cfg, k, seqs[k]) for k in range(runs)]
    return {"config": cfg.to_dict(), "results": results, "summary": summarize(results)}


def summarize(results: Sequence[RunResult]) -> dict:
    """Mean/sd of the final-step metrics across runs."""
    finals = [r.final for r in results if r.steps]
    out = {"runs": len(results), "aborted": int(sum(r.aborted for r in results))}
    for key in ("er", "ee", "bias", "ci"):
        vals = np.array([getattr(s, key) for s in finals], float)
        out[f"{key}_mean"] = float(vals.mean()) if len(vals) else float("nan")
        out[f"{key}_sd"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return out


def median_series(results: Sequence[RunResult], key: str = "ee"):
    """Median over runs of a per-step metric, on the common step grid."""
    by_n: Dict[int, list] = {}
    for r in results:
        for s in r.steps:
            by_n.setdefault(s.n, []).append(getattr(s, key))
    ns = np.array(sorted(by_n))
    return ns, np.array([np.median(by_n[n]) for n in ns])
