"""Convergence metric, potential function and complexity counters."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from decbilevel.problems import BilevelProblem

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "t",
    "stationarity",
    "consensus",
    "consensus_normalized",
    "lower_error",
    "metric_total",
    "potential",
    "ifo_per_agent",
    "comm_rounds",
)


@dataclass(frozen=True)
class MetricsRecord:
    t: int
    stationarity: float
    consensus: float
    consensus_normalized: float
    lower_error: float
    metric_total: float
    potential: float
    ifo_per_agent: int
    comm_rounds: int
    # diagnostics outside the CSV schema
    tracking_error: float = 0.0

    def csv_row(self) -> list[str]:
        return [_fmt(getattr(self, name)) for name in CSV_COLUMNS]

    def is_finite(self) -> bool:
        return all(np.isfinite(getattr(self, f.name)) for f in fields(self))


def _fmt(v) -> str:
    # repr gives the shortest round-tripping form and never uses the locale
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def _spread(block: np.ndarray) -> float:
    """``|X - 1 (x) mean(X)|^2`` for an (m, d) block."""
    dev = block - block.mean(axis=0)
    return float(np.sum(dev * dev))


def lower_level_error(state, problem: BilevelProblem) -> float:
    total = 0.0
    for i in range(problem.m):
        r = state.y[i] - problem.inner_opt(i, state.x[i])
        total += float(r @ r)
    return total


def potential_weight(r: float, lam: float, L_y: float) -> float:
    """Weight on the inner-error term of the potential; 1 when ``L_y`` is 0."""
    if L_y == 0:
        return 1.0
    return (1.0 - lam) / (32.0 * (1.0 + 1.0 / r) * L_y ** 2)


def potential(state, problem: BilevelProblem, alpha: float, r: float, lam: float,
              L_y: float, lower_error: float | None = None) -> float:
    """Potential ``ell(xbar) + w |y - y*|^2 + |x - 1 xbar|^2 + alpha |u - 1 ubar|^2``."""
    if r <= 0:
        raise ValueError("r must be positive")
    if L_y == 0:
        log.debug("L_y = 0; inner-error weight in the potential replaced by 1")
    if lower_error is None:
        lower_error = lower_level_error(state, problem)
    xbar = state.x.mean(axis=0)
    return (problem.ell(xbar) + potential_weight(r, lam, L_y) * lower_error
            + _spread(state.x) + alpha * _spread(state.u))


def convergence_metric(state, problem: BilevelProblem, *, alpha: float | None = None,
                       r: float | None = None, lam: float | None = None,
                       L_y: float | None = None) -> MetricsRecord:
    """Evaluate the three metric terms at ``state``.

    The potential is filled in when ``alpha, r, lam, L_y`` are all given,
    otherwise it is NaN.
    """
    xbar = state.x.mean(axis=0)
    g = problem.true_global_grad(xbar)
    stationarity = float(g @ g)
    consensus = _spread(state.x)
    lower = lower_level_error(state, problem)
    if None in (alpha, r, lam, L_y):
        pot = float("nan")
    else:
        pot = potential(state, problem, alpha, r, lam, L_y, lower_error=lower)
    ubar = state.u.mean(axis=0)
    pbar = state.p_prev.mean(axis=0)
    return MetricsRecord(
        t=int(state.t),
        stationarity=stationarity,
        consensus=consensus,
        consensus_normalized=consensus / problem.m,
        lower_error=lower,
        metric_total=stationarity + consensus + lower,
        potential=pot,
        ifo_per_agent=int(state.ifo.max()),
        comm_rounds=int(state.comm_rounds),
        tracking_error=float(np.linalg.norm(ubar - pbar)),
    )


def c_bias(alpha: float, r: float, lam: float, L_y: float, bias: float) -> float:
    """Additive floor of the variance-reduced rate, from the estimator bias bound."""
    terms = [(1.0 - lam) / 4.0, alpha / 2.0]
    if L_y > 0:
        terms.append(3.0 * r ** 2 * (1.0 - lam) / (32.0 * (1.0 + r) * L_y ** 2))
    return 2.0 * alpha * bias ** 2 / min(terms)
