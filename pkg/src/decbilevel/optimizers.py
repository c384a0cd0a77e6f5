"""INTERACT, SVR-INTERACT and the GT-DSGD / D-SGD baselines.

Every algorithm shares one round skeleton:

1. mix the previous outer iterates (and trackers) over the network and take
   a descent step on ``x`` with the tracker ``u`` and on ``y`` with ``v``;
2. each agent evaluates its new local gradient estimates ``p_i, d_i``;
3. trackers are updated as ``u_i <- sum_j M_ij u_j + p_i - p_i(prev)`` and
   ``v_i <- d_i`` (the inner gradient is never tracked).

They differ only in how ``p_i, d_i`` are estimated, and D-SGD drops the
tracking in step 3 (``u_i <- p_i``).

IFO accounting, per agent: a full-gradient evaluation costs ``2n`` (``n``
outer plus ``n`` inner samples). A stochastic round with minibatch ``S`` and
Neumann length ``K`` costs ``S * (K + 3)``: ``K + 2`` samples per outer
hypergradient draw plus one inner sample. Variance-reduced differences reuse
the same samples at both iterates and are counted once.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from decbilevel import metrics
from decbilevel.hypergradient import (
    draw_neumann,
    hypergrad_draws,
    hypergrad_full,
    r_of,
    derived_constants,
)
from decbilevel.problems import BilevelProblem
from decbilevel.rng import agent_streams
from decbilevel.runtime import AgentFailure, ExchangePlan, exchange_plan, mix, round_barrier
from decbilevel.topology import ConsensusMatrix, Graph, build_consensus_matrix

DIVERGENCE_LIMIT = 1e8


class Variant(str, Enum):
    INTERACT = "interact"
    SVR = "svr"
    GT_DSGD = "gt-dsgd"
    DSGD = "dsgd"


class RoundFailure(RuntimeError):
    """A round could not be completed; ``round`` is the round being computed."""

    def __init__(self, round_index: int, message: str, agent: int | None = None):
        super().__init__(f"round {round_index}: {message}")
        self.round = round_index
        self.agent = agent


class DivergenceError(RoundFailure):
    """Iterates left the ball of radius ``DIVERGENCE_LIMIT``; step sizes too large."""


@dataclass(frozen=True)
class AlgoConfig:
    variant: Variant
    alpha: float
    beta: float
    T: int
    q: int | None = None
    batch: int | None = None
    K: int = 10
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("step sizes must be nonnegative")
        if self.T < 0:
            raise ValueError("T must be nonnegative")
        if self.q is not None and self.q < 1:
            raise ValueError("q must be >= 1")
        if self.batch is not None and self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")

    def resolved(self, n: int) -> "AlgoConfig":
        """Fill the defaults that depend on the sample count: ``q = ceil(sqrt(n))``, ``batch = q``."""
        q = self.q if self.q is not None else math.isqrt(n - 1) + 1 if n > 1 else 1
        batch = self.batch if self.batch is not None else q
        return replace(self, q=q, batch=batch)


@dataclass(frozen=True)
class NetworkState:
    """Stacked per-agent state; row ``i`` belongs to agent ``i``."""

    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    p_prev: np.ndarray
    d_prev: np.ndarray
    t: int
    rngs: tuple = field(repr=False)
    ifo: np.ndarray
    comm_rounds: int

    @property
    def m(self) -> int:
        return self.x.shape[0]


def _as_plan(M) -> ExchangePlan:
    if isinstance(M, ExchangePlan):
        return M
    return exchange_plan(M)


def _full_local(problem, i, x, y):
    return hypergrad_full(problem, i, x, y), problem.inner_grad(i, x, y), 2 * problem.n


def init_state(problem: BilevelProblem, config: AlgoConfig, x0=None, y0=None) -> NetworkState:
    """All agents start at ``(x0, y0)`` (zeros by default) with full local gradients."""
    m = problem.m
    x0 = np.zeros(problem.d1) if x0 is None else np.asarray(x0, dtype=float)
    y0 = np.zeros(problem.d2) if y0 is None else np.asarray(y0, dtype=float)
    x = np.tile(x0, (m, 1))
    y = np.tile(y0, (m, 1))
    p = np.empty((m, problem.d1))
    d = np.empty((m, problem.d2))
    for i in range(m):
        p[i], d[i], _ = _full_local(problem, i, x[i], y[i])
    return NetworkState(x=x, y=y, u=p.copy(), v=d.copy(), p_prev=p, d_prev=d, t=0,
                        rngs=tuple(agent_streams(config.seed, m)),
                        ifo=np.full(m, 2 * problem.n, dtype=np.int64), comm_rounds=0)


def _round(state: NetworkState, problem: BilevelProblem, plan: ExchangePlan, alpha: float,
           beta: float, local, track: bool, pool=None) -> NetworkState:
    t = state.t + 1
    x_new = mix(state.x, plan) - alpha * state.u
    y_new = state.y - beta * state.v
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(y_new))) or max(
            np.max(np.linalg.norm(x_new, axis=1)), np.max(np.linalg.norm(y_new, axis=1))) > DIVERGENCE_LIMIT:
        raise DivergenceError(t, f"iterate norm exceeded {DIVERGENCE_LIMIT:g}; reduce the step sizes")

    try:
        out = round_barrier(lambda i: local(i, x_new[i], y_new[i]), state.m, pool)
    except AgentFailure as exc:
        raise RoundFailure(t, str(exc.cause), agent=exc.agent) from exc.cause

    p = np.array([o[0] for o in out])
    d = np.array([o[1] for o in out])
    inc = np.array([o[2] for o in out], dtype=np.int64)
    rngs = tuple(o[3] if len(o) > 3 else state.rngs[i] for i, o in enumerate(out))
    u = mix(state.u, plan) + p - state.p_prev if track else p.copy()
    return NetworkState(x=x_new, y=y_new, u=u, v=d.copy(), p_prev=p, d_prev=d, t=t, rngs=rngs,
                        ifo=state.ifo + inc, comm_rounds=state.comm_rounds + 1)


def _fork(rng: np.random.Generator) -> np.random.Generator:
    # advance a private copy so a failed round leaves the committed stream untouched
    bits = np.random.Philox(0)
    bits.state = rng.bit_generator.state
    return np.random.Generator(bits)


def _stochastic_local(problem, state, batch, K):
    n = problem.n

    def local(i, x, y):
        rng = _fork(state.rngs[i])
        draws = draw_neumann(rng, n, K, batch)
        inner_idx = rng.integers(n, size=batch)
        est = hypergrad_draws(problem, i, x, y, draws)
        p = est.mean(axis=0)
        d = problem.inner_grad(i, x, y, inner_idx)
        return p, d, batch * (K + 3), rng

    return local


def step_interact(state, problem, M, alpha, beta, pool=None) -> NetworkState:
    def local(i, x, y):
        return _full_local(problem, i, x, y)

    return _round(state, problem, _as_plan(M), alpha, beta, local, track=True, pool=pool)


def step_svr(state, problem, M, config: AlgoConfig, pool=None) -> NetworkState:
    """Variance-reduced round; every ``q``-th round refreshes with full gradients."""
    cfg = config.resolved(problem.n)
    t = state.t + 1
    if t % cfg.q == 0:
        return step_interact(state, problem, M, cfg.alpha, cfg.beta, pool=pool)

    n, K, S = problem.n, cfg.K, cfg.batch

    def local(i, x, y):
        rng = _fork(state.rngs[i])
        draws = draw_neumann(rng, n, K, S)
        inner_idx = rng.integers(n, size=S)
        x_old, y_old = state.x[i], state.y[i]
        diff = hypergrad_draws(problem, i, x, y, draws) - hypergrad_draws(problem, i, x_old, y_old, draws)
        p = state.p_prev[i] + diff.mean(axis=0)
        d = state.d_prev[i] + (problem.inner_grad(i, x, y, inner_idx)
                               - problem.inner_grad(i, x_old, y_old, inner_idx))
        return p, d, S * (K + 3), rng

    return _round(state, problem, _as_plan(M), cfg.alpha, cfg.beta, local, track=True, pool=pool)


def step_gt_dsgd(state, problem, M, alpha, beta, batch, K, pool=None) -> NetworkState:
    local = _stochastic_local(problem, state, batch, K)
    return _round(state, problem, _as_plan(M), alpha, beta, local, track=True, pool=pool)


def step_dsgd(state, problem, M, alpha, beta, batch, K, pool=None) -> NetworkState:
    # without tracking u_i holds the agent's own last estimate, so x mixes minus alpha * p_i
    local = _stochastic_local(problem, state, batch, K)
    return _round(state, problem, _as_plan(M), alpha, beta, local, track=False, pool=pool)


def step(state, problem, plan, config: AlgoConfig, pool=None) -> NetworkState:
    v = config.variant
    if v is Variant.INTERACT:
        return step_interact(state, problem, plan, config.alpha, config.beta, pool)
    if v is Variant.SVR:
        return step_svr(state, problem, plan, config, pool)
    cfg = config.resolved(problem.n)
    if v is Variant.GT_DSGD:
        return step_gt_dsgd(state, problem, plan, cfg.alpha, cfg.beta, cfg.batch, cfg.K, pool)
    return step_dsgd(state, problem, plan, cfg.alpha, cfg.beta, cfg.batch, cfg.K, pool)


def ifo_closed_form(config: AlgoConfig, n: int) -> int:
    """Per-agent IFO count after ``config.T`` rounds."""
    cfg = config.resolved(n)
    T, K, S = cfg.T, cfg.K, cfg.batch
    if cfg.variant is Variant.INTERACT:
        return 2 * n * (T + 1)
    if cfg.variant is Variant.SVR:
        full = T // cfg.q
        return 2 * n * (full + 1) + (T - full) * S * (K + 3)
    return 2 * n + T * S * (K + 3)


def run(problem: BilevelProblem, topology: Graph | ConsensusMatrix, config: AlgoConfig,
        metric_every: int = 1, x0=None, y0=None, region_radius: float = 10.0,
        states: list | None = None) -> list[metrics.MetricsRecord]:
    """Execute ``config.T`` rounds and record metrics every ``metric_every`` rounds.

    Records are taken at every ``t`` divisible by ``metric_every``, starting
    at ``t = 0``. When ``states`` is a list, every state (including the
    initial one) is appended to it.
    """
    if metric_every < 1:
        raise ValueError("metric_every must be >= 1")
    cm = build_consensus_matrix(topology) if isinstance(topology, Graph) else topology
    if cm.m != problem.m:
        raise ValueError(f"topology has {cm.m} agents, problem has {problem.m}")
    cfg = config.resolved(problem.n)
    plan = exchange_plan(cm)

    consts = problem.constants(region_radius)
    L_y = derived_constants(consts).L_y
    r = r_of(cfg.beta, consts)
    pot_args = dict(alpha=cfg.alpha, r=r, lam=cm.lam, L_y=L_y) if r > 0 else {}

    state = init_state(problem, cfg, x0, y0)
    if states is not None:
        states.append(state)
    records = [metrics.convergence_metric(state, problem, **pot_args)]
    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for _ in range(cfg.T):
            state = step(state, problem, plan, cfg, pool)
            if states is not None:
                states.append(state)
            if state.t % metric_every == 0:
                rec = metrics.convergence_metric(state, problem, **pot_args)
                if not np.isfinite(rec.metric_total):
                    raise DivergenceError(state.t, "metric is not finite")
                records.append(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    return records
