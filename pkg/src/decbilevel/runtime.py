"""Round-synchronous in-process network simulation.

Agents exchange their outer iterate and tracker blocks with neighbors once
per round. Mixing reads only the immutable round ``t-1`` snapshot, so the
per-agent local work of a round can run on any schedule; ``round_barrier``
is the only synchronization point.
"""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np

from decbilevel import _kernels
from decbilevel.topology import ConsensusMatrix

T = TypeVar("T")


class AgentFailure(RuntimeError):
    """A per-agent computation raised; the round was not committed."""

    def __init__(self, agent: int, cause: BaseException):
        super().__init__(f"agent {agent} failed: {cause}")
        self.agent = agent
        self.cause = cause


@dataclass(frozen=True)
class ExchangePlan:
    """Who each agent listens to, with what weight.

    Stored CSR-style: agent ``i`` reads ``indices[indptr[i]:indptr[i+1]]``
    (ascending agent id, self included) with matching ``weights``.
    """

    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    @property
    def m(self) -> int:
        return self.indptr.size - 1

    def neighbors(self, i: int) -> list[tuple[int, float]]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return list(zip(self.indices[lo:hi].tolist(), self.weights[lo:hi].tolist()))

    def payload(self, d1: int) -> dict[str, int]:
        """Floats each agent sends per round: its x block and its u block."""
        return {"x": d1, "u": d1}


def exchange_plan(M: ConsensusMatrix | np.ndarray) -> ExchangePlan:
    w = M.entries if isinstance(M, ConsensusMatrix) else np.asarray(M, dtype=float)
    m = w.shape[0]
    indptr = [0]
    indices: list[int] = []
    weights: list[float] = []
    for i in range(m):
        nz = np.nonzero(w[i])[0]
        indices.extend(nz.tolist())
        weights.extend(w[i, nz].tolist())
        indptr.append(len(indices))
    return ExchangePlan(np.array(indptr, dtype=np.int64), np.array(indices, dtype=np.int64),
                        np.array(weights, dtype=np.float64))


def mix(values: np.ndarray, plan: ExchangePlan) -> np.ndarray:
    """``out_i = sum_j M_ij values_j`` over neighbors and self only."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != plan.m:
        raise ValueError(f"expected an ({plan.m}, d) block, got shape {values.shape}")
    return _kernels.mix(plan.indptr, plan.indices, plan.weights, values)


def round_barrier(execute: Callable[[int], T], m: int, pool: Executor | None = None) -> list[T]:
    """Run ``execute(i)`` for every agent and return results in agent order.

    With a ``pool`` the agents are submitted concurrently. Every call must
    finish before this returns; if any agent raises, nothing is returned and
    ``AgentFailure`` names the lowest failing agent.
    """
    if pool is None:
        results: list[T] = []
        for i in range(m):
            try:
                results.append(execute(i))
            except Exception as exc:
                raise AgentFailure(i, exc) from exc
        return results

    futures = [pool.submit(execute, i) for i in range(m)]
    outcomes: Sequence = [f.exception() for f in futures]
    for i, exc in enumerate(outcomes):
        if exc is not None:
            raise AgentFailure(i, exc) from exc
    return [f.result() for f in futures]
