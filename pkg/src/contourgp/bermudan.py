"""Bermudan option exercise boundaries learned as level sets of the timing value.

The timing value ``f(t, x) = C(t, x) - h(t, x)`` is sampled by simulating the
forward exercise policy; stopping is optimal where ``f < 0``. Stages are
fitted by backward induction and the resulting policy is valued out of sample.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy import stats
from scipy.stats import qmc

from .acquisition import AcquisitionSpec, DomainSpec, optimize_acquisition
from .benchmarks import SurrogateSettings, _robust_fit, condition_surrogate, refit_steps, sobol_points
from .gp_core import FitError, TrainingSet

logger = logging.getLogger(__name__)

PRODUCTS = ("put2d", "maxcall3d")
DESIGNS = ("lhs", "mcu", "tmse", "csur", "icu", "mee")
MU_FLOOR = 1e-6  # sequential points must have mu(x) >= MU_FLOOR * max mu


@dataclass(frozen=True)
class MarketModel:
    d: int
    r: float
    delta: float
    sigma: float
    dt: float
    T: float
    x0: tuple

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        k = self.T / self.dt
        if abs(k - round(k)) > 1e-9:
            raise ValueError("dt must divide T")
        object.__setattr__(self, "x0", tuple(float(v) for v in np.broadcast_to(self.x0, (self.d,))))

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    def time(self, k: int) -> float:
        return k * self.dt

    @property
    def drift(self) -> float:
        return self.r - self.delta - 0.5 * self.sigma ** 2

    def log_density(self, x, t: float) -> np.ndarray:
        """Log of the lognormal density of ``X_t`` given ``X_0 = x0``."""
        x = np.atleast_2d(x)
        m = np.log(self.x0) + self.drift * t
        s = self.sigma * np.sqrt(t)
        lx = np.log(np.maximum(x, 1e-300))
        return np.sum(stats.norm.logpdf(lx, m, s) - lx, axis=1)

    def max_log_density(self, t: float) -> float:
        # per-coordinate lognormal mode exp(m - s^2)
        m = np.log(self.x0) + self.drift * t
        s = self.sigma * np.sqrt(t)
        return float(self.log_density(np.exp(m - s ** 2)[None, :], t)[0])


def put2d_market() -> MarketModel:
    return MarketModel(d=2, r=0.06, delta=0.0, sigma=0.2, dt=0.04, T=1.0, x0=(40.0, 40.0))


def maxcall3d_market() -> MarketModel:
    return MarketModel(d=3, r=0.05, delta=0.1, sigma=0.2, dt=1.0 / 3.0, T=3.0, x0=(90.0, 90.0, 90.0))


@dataclass(frozen=True)
class Payoff:
    kind: str
    strike: float
    r: float

    def __post_init__(self):
        if self.kind not in ("basket_put", "max_call"):
            raise ValueError(f"unknown payoff {self.kind!r}")

    def __call__(self, t, x) -> np.ndarray:
        """Discounted payoff ``e^{-rt} (...)_+``."""
        x = np.atleast_2d(x)
        if self.kind == "basket_put":
            raw = self.strike - x.mean(axis=1)
        else:
            raw = x.max(axis=1) - self.strike
        return np.exp(-self.r * t) * np.maximum(raw, 0.0)


def product(name: str):
    """``(MarketModel, Payoff, DomainSpec, monotone directions)`` of a named case study."""
    if name == "put2d":
        m = put2d_market()
        pay = Payoff("basket_put", 40.0, m.r)
        dom = DomainSpec((25.0, 25.0), (55.0, 55.0), A=((1.0, 1.0),), b=(80.0,))
        return m, pay, dom, (1, 1)
    if name == "maxcall3d":
        m = maxcall3d_market()
        pay = Payoff("max_call", 100.0, m.r)
        dom = DomainSpec((50.0,) * 3, (150.0,) * 3, predicate=_above_strike)
        return m, pay, dom, None
    raise ValueError(f"unknown product {name!r}; choose from {PRODUCTS}")


def _above_strike(X):
    return np.max(X, axis=1) > 100.0


def gbm_step(x, model: MarketModel, rng, z=None) -> np.ndarray:
    """One exercise interval of independent geometric Brownian motions."""
    x = np.atleast_2d(np.asarray(x, float))
    if z is None:
        z = np.random.default_rng(rng).standard_normal(x.shape)
    return x * np.exp(model.drift * model.dt + model.sigma * np.sqrt(model.dt) * z)


# ---------------------------------------------------------------- policies

def unit_domain(domain: DomainSpec) -> DomainSpec:
    """``domain`` expressed in the coordinates of its bounding unit cube."""
    span = domain.hi_arr - domain.lo_arr
    A = b = None
    if domain.A is not None:
        A0 = np.asarray(domain.A)
        A = A0 * span[None, :]
        b = np.asarray(domain.b) - A0 @ domain.lo_arr
    pred = None
    if domain.predicate is not None:
        pred = _UnitPredicate(domain)
    return DomainSpec([0.0] * domain.dim, [1.0] * domain.dim, A, b, pred)


class _UnitPredicate:
    def __init__(self, domain):
        self.domain = domain

    def __call__(self, U):
        return self.domain.predicate(self.domain.from_unit(U))


@dataclass
class StagePolicy:
    """Exercise rule at one time step: stop iff ``h > 0`` and ``f_hat < 0``.

    The surrogate lives in unit coordinates of the domain's box; points with
    ``h > 0`` outside the box are projected onto it. ``surrogate=None``
    means "continue everywhere".
    """

    step: int
    t: float
    surrogate: object
    domain: DomainSpec
    payoff: Payoff

    def timing_estimate(self, X) -> np.ndarray:
        U = np.clip(self.domain.to_unit(X), 0.0, 1.0)
        return self.surrogate.predict(U)[0]

    def exercise(self, X) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.zeros(len(X), bool)
        if self.surrogate is None:
            return out
        itm = self.payoff(self.t, X) > 0
        if itm.any():
            out[itm] = self.timing_estimate(X[itm]) < 0
        return out


@dataclass
class ExercisePolicy:
    model: MarketModel
    payoff: Payoff
    stages: Dict[int, StagePolicy] = field(default_factory=dict)

    def exercise(self, k: int, X) -> np.ndarray:
        X = np.atleast_2d(X)
        if k >= self.model.steps:
            return self.payoff(self.model.T, X) > 0
        st = self.stages.get(k)
        if st is None:
            return np.zeros(len(X), bool)
        return st.exercise(X)

    @classmethod
    def hold_to_maturity(cls, model, payoff):
        return cls(model, payoff, {})


class _ExerciseFirst:
    """Exercise at the first step at which the payoff is positive."""

    def __init__(self, model, payoff):
        self.model, self.payoff = model, payoff

    def exercise(self, k, X):
        return self.payoff(self.model.time(k), X) > 0


def exercise_immediately(model, payoff):
    return _ExerciseFirst(model, payoff)


def simulate_stopped_payoffs(k: int, X, policy, model: MarketModel, payoff: Payoff, rng) -> np.ndarray:
    """Discounted payoff at the first policy exercise after step ``k`` for paths started at ``X``."""
    rng = np.random.default_rng(rng)
    X = np.array(np.atleast_2d(X), float)
    m = len(X)
    value = np.zeros(m)
    alive = np.ones(m, bool)
    for j in range(k + 1, model.steps + 1):
        idx = np.flatnonzero(alive)
        Z = rng.standard_normal((len(idx), model.d))
        X[idx] = gbm_step(X[idx], model, None, Z)
        if not len(idx):
            continue
        stop = policy.exercise(j, X[idx])
        if stop.any():
            s = idx[stop]
            value[s] = payoff(model.time(j), X[s])
            alive[s] = False
    return value


def pathwise_timing_value(t: float, x, policy, model: MarketModel, payoff: Payoff, rng, size: int = 1) -> np.ndarray:
    """``size`` draws of (discounted payoff under the forward policy) ``- h(t, x)``."""
    k = int(round(t / model.dt))
    x = np.asarray(x, float).reshape(1, -1)
    X = np.repeat(x, size, axis=0)
    return simulate_stopped_payoffs(k, X, policy, model, payoff, rng) - payoff(t, x)[0]


def batched_sample(t: float, x, r: int, policy, model, payoff, rng):
    """Mean of ``r`` independent timing-value draws at ``x`` and the count ``r``."""
    if r < 1:
        raise ValueError("r must be at least 1")
    y = pathwise_timing_value(t, x, policy, model, payoff, rng, size=r)
    return float(y.mean()), r


def value_option(policy, model: MarketModel, payoff: Payoff, M: int, rng):
    """Out-of-sample value ``(1/M) sum h(tau^m, x^m_tau)`` and its standard error."""
    X = np.repeat(np.asarray(model.x0, float)[None, :], M, axis=0)
    v = simulate_stopped_payoffs(0, X, policy, model, payoff, rng)
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(M))


def european_put_basket_value(model, payoff, nodes: int = 80) -> float:
    """``E[e^{-rT}(K - mean X_T)_+]`` for the hold-to-maturity policy, by Gauss-Hermite quadrature."""
    g, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    s = model.sigma * np.sqrt(model.T)
    m = np.log(model.x0) + model.drift * model.T
    G = np.meshgrid(*([g] * model.d), indexing="ij")
    X = np.stack([np.exp(m[j] + s * G[j].ravel()) for j in range(model.d)], axis=1)
    W = np.prod(np.meshgrid(*([w] * model.d), indexing="ij"), axis=0).ravel()
    return float(W @ payoff(model.T, X))


# ---------------------------------------------------------------- stage fitting

@dataclass
class BermudanConfig:
    product: str = "put2d"
    surrogate: str = "gp"
    design: str = "tmse"
    reps: int = 15
    n_unique: int = 80
    n0: Optional[int] = None
    runs: int = 10
    seed: int = 2018
    eval_paths: int = 16000
    eval_seed: int = 20181
    restarts: int = 3
    icu_grid_size: int = 400
    gamma: Optional[float] = None
    ga_population: int = 50
    ga_generations: int = 200

    def __post_init__(self):
        if self.product not in PRODUCTS:
            raise ValueError(f"unknown product {self.product!r}; choose from {PRODUCTS}")
        if self.design not in DESIGNS:
            raise ValueError(f"unknown design {self.design!r}; choose from {DESIGNS}")
        SurrogateSettings(self.surrogate)
        if self.surrogate in ("mgp", "mclgp") and self.product != "put2d":
            raise ValueError("monotone surrogates are only available for put2d")
        if self.n0 is None:
            self.n0 = 10 if self.product == "put2d" else 30
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if not 2 <= self.n0 <= self.n_unique:
            raise ValueError(f"need 2 <= n0 <= n_unique, got n0={self.n0}, n_unique={self.n_unique}")
        if self.eval_paths < 2:
            raise ValueError("eval_paths must be at least 2")

    @property
    def budget(self) -> int:
        return self.reps * self.n_unique

    def to_dict(self) -> dict:
        return asdict(self)


def constrained_lhs(n: int, unit_dom: DomainSpec, rng, max_tries: int = 50) -> np.ndarray:
    """LHS restricted to a subset of the unit cube: oversample, keep feasible rows, subsample to ``n``."""
    rng = np.random.default_rng(rng)
    frac = max(float(unit_dom.feasible(sobol_points(unit_dom.dim, 1024, rng.integers(2 ** 31))).mean()), 1e-3)
    m = int(np.ceil(n / frac * 1.2)) + 1
    for _ in range(max_tries):
        U = qmc.LatinHypercube(unit_dom.dim, seed=rng).random(m)
        U = U[unit_dom.feasible(U)]
        if len(U) >= n:
            return U[np.sort(rng.choice(len(U), n, replace=False))]
        m *= 2
    raise ValueError("could not place an LHS design in the domain")


@dataclass
class StageRecord:
    step: int
    t: float
    design: np.ndarray
    y: np.ndarray
    fallback: bool
    params: Optional[dict]
    wall: float


class _Mu:
    """Normalised lognormal density in unit coordinates."""

    def __init__(self, model, domain, t):
        self.model, self.domain, self.t = model, domain, t
        self.log_max = model.max_log_density(t)

    def __call__(self, U):
        return np.exp(self.model.log_density(self.domain.from_unit(U), self.t) - self.log_max)


class _HighMu:
    """Feasibility predicate ``mu >= MU_FLOOR`` combined with the domain itself."""

    def __init__(self, mu, unit_dom):
        self.mu, self.unit_dom = mu, unit_dom

    def __call__(self, U):
        return self.unit_dom.feasible(U) & (self.mu(U) >= MU_FLOOR)


def fit_stage(k: int, policy: ExercisePolicy, cfg: BermudanConfig, rng=None, domain=None, directions=None):
    """Learn ``S_t`` at step ``k`` given the policy at later steps.

    ``rng`` is a SeedSequence or integer seed. Returns ``(StagePolicy, StageRecord)``. A failed surrogate fit yields the
    "continue everywhere" stage with a logged warning.
    """
    seq = rng if isinstance(rng, np.random.SeedSequence) else np.random.SeedSequence(rng)
    model, payoff = policy.model, policy.payoff
    if domain is None:
        _, _, domain, directions = product(cfg.product)
    t = model.time(k)
    udom = unit_domain(domain)
    sim_rng, fit_rng, opt_rng, design_rng = [np.random.default_rng(s) for s in seq.spawn(4)]
    t0 = time.perf_counter()

    def sample(U):
        return batched_sample(t, domain.from_unit(U[None, :])[0], cfg.reps, policy, model, payoff, sim_rng)[0]

    n_design = cfg.n_unique if cfg.design == "lhs" else cfg.n0
    U = constrained_lhs(n_design, udom, design_rng)
    y = np.array([sample(u) for u in U])
    data = TrainingSet(U, y, np.full(len(y), float(cfg.reps)))
    settings = SurrogateSettings(cfg.surrogate, cfg.restarts, directions, lookahead_reps=float(cfg.reps))
    mu = _Mu(model, domain, t)
    acq_dom = DomainSpec(udom.lo, udom.hi, predicate=_HighMu(mu, udom))
    icu_grid = icu_w = None
    if cfg.design == "icu":
        icu_grid = acq_dom.sobol(cfg.icu_grid_size, seed=design_rng.integers(2 ** 31))
        icu_w = mu(icu_grid)
    spec = None
    if cfg.design != "lhs":
        spec = AcquisitionSpec(cfg.design, gamma=cfg.gamma, icu_grid=icu_grid, icu_weights=icu_w,
                               measure=mu, population=cfg.ga_population, generations=cfg.ga_generations)
    refits = set(refit_steps(cfg.n0, cfg.n_unique))
    try:
        post = _robust_fit(settings, data, fit_rng, None, udom)
        while data.n < cfg.n_unique:
            u = optimize_acquisition(spec, post, acq_dom, opt_rng)
            yn = sample(u)
            data = data.append(u, yn, float(cfg.reps))
            if data.n in refits:
                post = _robust_fit(settings, data, fit_rng, post, udom)
            else:
                post = condition_surrogate(settings, post, data, u, yn, float(cfg.reps))
    except FitError as exc:
        logger.warning("stage %d (t=%.3f): surrogate failed (%s); continuing everywhere", k, t, exc)
        rec = StageRecord(k, t, domain.from_unit(data.X), data.y, True, None, time.perf_counter() - t0)
        return StagePolicy(k, t, None, domain, payoff), rec
    p = post.params
    params = {"sigma_se": float(p.sigma_se), "theta": [float(v) for v in p.theta], "tau": float(p.tau),
              "nu": None if p.nu is None else float(p.nu)}
    rec = StageRecord(k, t, domain.from_unit(data.X), data.y, False, params, time.perf_counter() - t0)
    return StagePolicy(k, t, post, domain, payoff), rec


@dataclass
class BermudanResult:
    run: int
    value: float
    stderr: float
    policy: ExercisePolicy
    stages: List[StageRecord]
    wall: float


def learn_policy(cfg: BermudanConfig, seed_seq, callback=None):
    """Backward induction over ``t = T - dt, ..., dt``."""
    model, payoff, domain, dirs = product(cfg.product)
    policy = ExercisePolicy(model, payoff)
    records = []
    K = model.steps
    seqs = seed_seq.spawn(K - 1)
    for k in range(K - 1, 0, -1):
        st, rec = fit_stage(k, policy, cfg, seqs[k - 1], domain, dirs)
        policy.stages[k] = st
        records.append(rec)
        if callback is not None:
            callback(rec)
    return policy, records[::-1]


def run_bermudan(cfg: BermudanConfig, run_index: int = 0, seed_seq=None, callback=None) -> BermudanResult:
    t0 = time.perf_counter()
    seed_seq = seed_seq if seed_seq is not None else np.random.SeedSequence(cfg.seed).spawn(run_index + 1)[run_index]
    policy, records = learn_policy(cfg, seed_seq, callback)
    v, se = value_option(policy, policy.model, policy.payoff, cfg.eval_paths, np.random.default_rng(cfg.eval_seed))
    return BermudanResult(run_index, v, se, policy, records, time.perf_counter() - t0)


def macroreplicate_bermudan(cfg: BermudanConfig, runs: Optional[int] = None, workers: Optional[int] = None):
    from .benchmarks import default_workers

    runs = cfg.runs if runs is None else runs
    workers = default_workers() if workers is None else workers
    seqs = np.random.SeedSequence(cfg.seed).spawn(runs)
    if workers > 1 and runs > 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=workers)(delayed(run_bermudan)(cfg, k, seqs[k]) for k in range(runs))
    else:
        results = [run_bermudan(cfg, k, seqs[k]) for k in range(runs)]
    vals = np.array([r.value for r in results])
    summary = {"runs": runs, "value_mean": float(vals.mean()),
               "value_sd": float(vals.std(ddof=1)) if runs > 1 else 0.0,
               "stderr_mean": float(np.mean([r.stderr for r in results]))}
    return {"config": cfg.to_dict(), "results": results, "summary": summary}


def boundary_grid(stage: StagePolicy, n: int = 41, fixed=None):
    """Sign of ``f_hat`` on an ``n x n`` grid over the first two coordinates
    (others fixed at ``fixed``, default the box centre); NaN outside the domain."""
    dom = stage.domain
    g1 = np.linspace(dom.lo[0], dom.hi[0], n)
    g2 = np.linspace(dom.lo[1], dom.hi[1], n)
    G1, G2 = np.meshgrid(g1, g2, indexing="ij")
    rest = 0.5 * (dom.lo_arr + dom.hi_arr) if fixed is None else np.asarray(fixed, float)
    X = np.tile(rest, (n * n, 1))
    X[:, 0], X[:, 1] = G1.ravel(), G2.ravel()
    sign = np.full(n * n, np.nan)
    ok = dom.feasible(X)
    if stage.surrogate is not None and ok.any():
        sign[ok] = np.sign(stage.timing_estimate(X[ok]))
    return g1, g2, sign.reshape(n, n)
