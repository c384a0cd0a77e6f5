"""Command-line experiment driver.

Subcommands
-----------
run       simulate one algorithm and write the trajectory CSV
clauses   print every step-size clause for the configured instance
graph     write the sampled communication graph as an edge list

Configuration comes from flags and, optionally, a JSON file passed with
``--config``; flags win on conflict. Exit codes: 0 success, 2 configuration
error, 3 divergence, 4 oracle failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from decbilevel.hypergradient import (
    bias_bound,
    derived_constants,
    r_of,
    stepsize_bounds,
)
from decbilevel.metrics import CSV_COLUMNS, MetricsRecord, c_bias
from decbilevel.optimizers import AlgoConfig, DivergenceError, RoundFailure, Variant, run
from decbilevel.problems import OracleError, SyntheticQuadratic
from decbilevel.topology import (
    ConsensusMatrix,
    Graph,
    TopologyError,
    build_consensus_matrix,
    generate_er_graph,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_ORACLE = 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    algo: str = "interact"
    m: int = 5
    n: int = 1000
    d1: int = 8
    d2: int = 8
    p_edge: float = 0.5
    seed: int = 0
    T: int = 1000
    alpha: float | None = None
    beta: float | None = None
    q: int | None = None
    batch: int | None = None
    K: int = 10
    gamma: float = 0.5
    mu_g: float = 1.0
    L_g: float = 2.0
    heterogeneity: float = 2.0
    metric_every: int = 1
    out_path: str = "trajectory.csv"
    seeds: int = 1
    workers: int = 1
    region_radius: float = 10.0

    def __post_init__(self):
        try:
            Variant(self.algo)
        except ValueError:
            choices = ", ".join(v.value for v in Variant)
            raise ConfigError(f"algo={self.algo!r} is not one of {choices}") from None
        for key in ("m", "n", "d1", "d2", "K", "metric_every", "seeds", "workers"):
            _require(key, getattr(self, key), lambda v: v >= 1, "must be >= 1")
        for key in ("q", "batch"):
            if getattr(self, key) is not None:
                _require(key, getattr(self, key), lambda v: v >= 1, "must be >= 1")
        _require("T", self.T, lambda v: v >= 0, "must be >= 0")
        for key in ("alpha", "beta"):
            if getattr(self, key) is not None:
                _require(key, getattr(self, key), lambda v: v >= 0 and math.isfinite(v),
                         "must be a finite nonnegative number")
        _require("p_edge", self.p_edge, lambda v: 0 < v <= 1, "must lie in (0, 1]")
        _require("gamma", self.gamma, lambda v: v >= 0, "must be >= 0")
        _require("mu_g", self.mu_g, lambda v: v > 0, "must be > 0")
        _require("L_g", self.L_g, lambda v: v >= self.mu_g, "must be >= mu_g")
        _require("heterogeneity", self.heterogeneity, lambda v: v >= 0, "must be >= 0")
        _require("region_radius", self.region_radius, lambda v: v > 0, "must be > 0")
        # sampling defaults: q = ceil(sqrt(n)), batch = q
        q = self.q if self.q is not None else math.isqrt(self.n - 1) + 1
        object.__setattr__(self, "q", q)
        if self.batch is None:
            object.__setattr__(self, "batch", q)

    @property
    def variant(self) -> Variant:
        return Variant(self.algo)

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
        return cls(**data)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed)


def _require(key, value, ok, message):
    try:
        good = bool(ok(value))
    except TypeError:
        good = False
    if not good:
        raise ConfigError(f"{key}={value!r} {message}")


# ---------------------------------------------------------------------------
# parsing


def _config_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration")
    S = argparse.SUPPRESS
    g.add_argument("--config", default=S, help="JSON file with configuration keys")
    g.add_argument("--algo", default=S, choices=[v.value for v in Variant])
    for name in ("m", "n", "d1", "d2", "seed", "T", "q", "batch", "K", "metric-every",
                 "seeds", "workers"):
        g.add_argument(f"--{name}", type=int, default=S)
    for name in ("p-edge", "alpha", "beta", "gamma", "mu-g", "L-g", "heterogeneity",
                 "region-radius"):
        g.add_argument(f"--{name}", type=float, default=S)
    g.add_argument("--out", dest="out_path", default=S, help="trajectory CSV path")
    return p


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def parse_config(args: Sequence[str] | None = None) -> RunConfig:
    """Build a validated ``RunConfig`` from flags and an optional JSON file.

    Raises
    ------
    ConfigError
        Unknown key, malformed file or invalid value; the message names it.
    """
    parser = _Parser(parents=[_config_parser()], add_help=False)
    ns = vars(parser.parse_args([] if args is None else list(args)))
    return _config_from_namespace(ns)


def _config_from_namespace(ns: dict) -> RunConfig:
    data: dict = {}
    path = ns.pop("config", None)
    if path is not None:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        data.update(loaded)
    data.update(ns)
    return RunConfig.from_mapping(data)


# ---------------------------------------------------------------------------
# construction


def build_topology(config: RunConfig) -> Graph:
    if config.m == 1:
        return Graph(1, ())
    return generate_er_graph(config.m, config.p_edge, config.seed)


def build_problem(config: RunConfig) -> SyntheticQuadratic:
    return SyntheticQuadratic.generate(config.seed, config.m, config.n, config.d1, config.d2,
                                       mu_g=config.mu_g, L_g=config.L_g, gamma=config.gamma,
                                       heterogeneity=config.heterogeneity)


def _theorem_for(variant: Variant) -> str:
    return "svr" if variant in (Variant.SVR, Variant.GT_DSGD, Variant.DSGD) else "interact"


def resolve_stepsizes(config: RunConfig, problem, cm: ConsensusMatrix) -> tuple[float, float]:
    """Step sizes from the overrides, falling back to the theorem bounds."""
    if config.alpha is not None and config.beta is not None:
        return config.alpha, config.beta
    consts = problem.constants(config.region_radius)
    stochastic = config.variant is not Variant.INTERACT
    dc = derived_constants(consts, config.K if stochastic else None)
    ss = stepsize_bounds(dc, consts, cm.lam, config.m, _theorem_for(config.variant))
    alpha = config.alpha if config.alpha is not None else ss.alpha
    beta = config.beta if config.beta is not None else ss.beta
    return alpha, beta


def algo_config(config: RunConfig, alpha: float, beta: float) -> AlgoConfig:
    return AlgoConfig(config.variant, alpha=alpha, beta=beta, T=config.T, q=config.q,
                      batch=config.batch, K=config.K, seed=config.seed, workers=config.workers)


# ---------------------------------------------------------------------------
# output


def write_csv(records: Sequence[MetricsRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for rec in records:
            w.writerow(rec.csv_row())


def _trajectory_arrays(trajectory):
    if len(trajectory) and isinstance(trajectory[0], MetricsRecord):
        t = np.array([r.t for r in trajectory], dtype=float)
        v = np.array([r.metric_total for r in trajectory], dtype=float)
        return t, v
    arr = np.asarray(trajectory, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("trajectory must be MetricsRecords or (t, value) pairs")
    return arr[:, 0], arr[:, 1]


def running_mean(values: np.ndarray) -> np.ndarray:
    return np.cumsum(values) / np.arange(1, len(values) + 1)


def rate_fit(trajectory, t_min: float, t_max: float, running_mean: bool = True) -> float:
    """Least-squares slope of ``log(metric)`` against ``log(t)`` on ``[t_min, t_max]``.

    Parameters
    ----------
    trajectory : sequence of MetricsRecord or (t, value) pairs
        Ordered by ``t``.
    running_mean : bool
        Fit the running mean of the series up to each ``t`` (the default) or
        the series itself.

    Raises
    ------
    ValueError
        Fewer than 10 records with positive ``t`` inside the window.
    """
    t, v = _trajectory_arrays(trajectory)
    if running_mean:
        v = np.cumsum(v) / np.arange(1, len(v) + 1)
    w = (t >= t_min) & (t <= t_max) & (t > 0)
    if np.count_nonzero(w) < 10:
        raise ValueError(f"rate_fit needs >= 10 records in [{t_min}, {t_max}], "
                         f"got {np.count_nonzero(w)}")
    if np.any(v[w] <= 0):
        raise ValueError("rate_fit needs positive values in the window")
    slope, _ = np.polyfit(np.log(t[w]), np.log(v[w]), 1)
    return float(slope)


def _default_window(T: int) -> tuple[int, int]:
    return max(1, T // 100), T


def _summary(config: RunConfig, records, problem, cm, alpha, beta) -> str:
    T = config.T
    lo, hi = _default_window(T)
    try:
        slope = rate_fit(records, lo, hi)
    except ValueError:
        slope = float("nan")
    final = records[-1]
    rm = float(running_mean(np.array([r.metric_total for r in records]))[-1])
    consts = problem.constants(config.region_radius)
    if config.variant is Variant.INTERACT:
        floor = 0.0
    else:
        L_y = derived_constants(consts).L_y
        floor = c_bias(alpha, r_of(beta, consts), cm.lam, L_y, bias_bound(consts, config.K))
    return (f"algo={config.algo} seed={config.seed} T={T} alpha={alpha:.6g} beta={beta:.6g} "
            f"final_metric={final.metric_total:.6e} running_mean={rm:.6e} "
            f"ifo_per_agent={final.ifo_per_agent} ifo_total={final.ifo_per_agent * config.m} "
            f"comm_rounds={final.comm_rounds} slope={slope:.4f} c_bias={floor:.4e}")


def _seed_path(out: Path, seed: int) -> Path:
    return out.with_name(f"{out.stem}_seed{seed}{out.suffix or '.csv'}")


def write_aggregate(runs: Sequence[Sequence[MetricsRecord]], path: str | Path) -> None:
    """Cross-seed mean of ``metric_total`` at each recorded round."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "metric_total_mean", "running_mean", "seeds"])
        mean = np.mean([[r.metric_total for r in recs] for recs in runs], axis=0)
        rm = running_mean(mean)
        for k, rec in enumerate(runs[0]):
            w.writerow([rec.t, repr(float(mean[k])), repr(float(rm[k])), len(runs)])


# ---------------------------------------------------------------------------
# entry points


def execute(config: RunConfig, stream=None) -> int:
    """Run every seed of ``config``, write CSVs and print one summary line per seed."""
    stream = sys.stdout if stream is None else stream
    out = Path(config.out_path)
    seeds = [config.seed + s for s in range(config.seeds)]
    runs = []
    for seed in seeds:
        cfg = config.with_seed(seed)
        try:
            graph = build_topology(cfg)
            cm = build_consensus_matrix(graph)
            problem = build_problem(cfg)
            alpha, beta = resolve_stepsizes(cfg, problem, cm)
            records = run(problem, cm, algo_config(cfg, alpha, beta),
                          metric_every=cfg.metric_every, region_radius=cfg.region_radius)
        except (ConfigError, TopologyError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except DivergenceError as exc:
            print(f"error: diverged at round {exc.round} (seed {seed}): {exc}", file=sys.stderr)
            return EXIT_DIVERGED
        except OracleError as exc:
            print(f"error: oracle failure (seed {seed}): {exc}", file=sys.stderr)
            return EXIT_ORACLE
        except RoundFailure as exc:
            code = EXIT_ORACLE if isinstance(exc.__cause__, OracleError) else EXIT_DIVERGED
            print(f"error: round {exc.round} failed (seed {seed}, agent {exc.agent}): {exc}",
                  file=sys.stderr)
            return code
        if not all(r.is_finite() or np.isnan(r.potential) for r in records):
            print(f"error: non-finite metric (seed {seed})", file=sys.stderr)
            return EXIT_DIVERGED
        path = out if len(seeds) == 1 else _seed_path(out, seed)
        write_csv(records, path)
        runs.append(records)
        print(_summary(cfg, records, problem, cm, alpha, beta), file=stream)
    if len(seeds) > 1:
        agg = out.with_name(f"{out.stem}_aggregate{out.suffix or '.csv'}")
        write_aggregate(runs, agg)
        print(f"aggregate over {len(seeds)} seeds written to {agg}", file=stream)
    return EXIT_OK


def print_clauses(config: RunConfig, stream=None) -> int:
    """Print every step-size clause, its value and the binding minimum."""
    stream = sys.stdout if stream is None else stream
    cm = build_consensus_matrix(build_topology(config))
    problem = build_problem(config)
    consts = problem.constants(config.region_radius)
    for variant in ("interact", "svr"):
        dc = derived_constants(consts, None if variant == "interact" else config.K)
        ss = stepsize_bounds(dc, consts, cm.lam, config.m, variant)
        print(f"[{variant}] lambda={cm.lam:.6g} L_f={dc.L_f:.6g} L_ell={dc.L_ell:.6g} "
              f"L_y={dc.L_y:.6g} L_K={dc.L_K:.6g}", file=stream)
        for cl in ss.clauses:
            print(f"  {cl.target:5s} <= {cl.label:55s} = {cl.value:.6g}", file=stream)
        print(f"  -> alpha={ss.alpha:.6g} beta={ss.beta:.6g} r={ss.r:.6g}", file=stream)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = _config_parser()
    parser = argparse.ArgumentParser(prog="decbilevel", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="simulate and write the trajectory CSV")
    sub.add_parser("clauses", parents=[common], help="print the step-size clauses")
    gp = sub.add_parser("graph", parents=[common], help="write the sampled graph as an edge list")
    gp.add_argument("--graph-out", default="graph.txt")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = vars(parser.parse_args(argv))
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if ns.pop("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = ns.pop("command")
    graph_out = ns.pop("graph_out", None)
    try:
        config = _config_from_namespace(ns)
        if command == "run":
            return execute(config)
        if command == "clauses":
            return print_clauses(config)
        graph = build_topology(config)
        graph.save(graph_out)
        print(f"{graph.m} agents, {len(graph.edges)} edges written to {graph_out}")
        return EXIT_OK
    except (ConfigError, TopologyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
