"""Hypergradient estimators, Lipschitz constants and step-size rules.

The deterministic estimator applies the inverse inner Hessian by a Cholesky
solve. The stochastic estimator replaces the inverse with a randomly
truncated Neumann series:

    grad_x f(xi0) - (K/L) hess_xy(zeta0) prod_{j=1..k} (I - hess_yy(zeta_j)/L) grad_y f(xi0)

with ``k`` uniform on ``{0, ..., K-1}``; its expectation differs from the
exact inverse by a term that decays like ``(1 - mu/L)^K``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_solve

from decbilevel import _kernels
from decbilevel.problems import BilevelProblem, ProblemConstants

log = logging.getLogger(__name__)


def hypergrad_full(problem: BilevelProblem, i: int, x, y) -> np.ndarray:
    """Full-batch approximate hypergradient of agent ``i`` at ``(x, y)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    gx, gy = problem.outer_grads(i, x, y)
    z = cho_solve(problem.hess_yy_factor(i, x, y), gy, check_finite=False)
    return gx - problem.hvp_xy(i, x, y, None, z)


class NeumannDraws(NamedTuple):
    """Sample indices for ``S`` independent stochastic hypergradient draws."""

    xi0: np.ndarray  # (S,) outer-gradient sample
    zeta0: np.ndarray  # (S,) cross-Hessian sample
    k: np.ndarray  # (S,) truncation index in 0..K-1
    zetas: np.ndarray  # (S, K-1) product-factor samples
    K: int

    @property
    def size(self) -> int:
        return self.xi0.shape[0]


def draw_neumann(rng: np.random.Generator, n: int, K: int, size: int = 1) -> NeumannDraws:
    """Draw indices with replacement from ``n`` local samples.

    All ``K - 1`` product samples are drawn regardless of ``k`` so the number
    of generator calls per draw is fixed.
    """
    if K < 1:
        raise ValueError(f"Neumann length K must be >= 1, got {K}")
    xi0 = rng.integers(n, size=size)
    zeta0 = rng.integers(n, size=size)
    k = rng.integers(K, size=size)
    zetas = rng.integers(n, size=(size, K - 1))
    return NeumannDraws(xi0, zeta0, k, zetas, K)


def hypergrad_draws(problem: BilevelProblem, i: int, x, y, draws: NeumannDraws) -> np.ndarray:
    """Per-draw stochastic hypergradients at ``(x, y)``, shape (S, d1)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    gx, gy = problem.outer_grads_samples(i, x, y, draws.xi0)
    hyy, hxy = problem.hessian_stacks(i, x, y)
    idx = [np.asarray(a, dtype=np.int64) for a in (draws.zeta0, draws.k, draws.zetas)]
    return _kernels.neumann_draws(gx, gy, hyy, hxy, *idx, draws.K, float(problem.L_g))


def hypergrad_batch(problem: BilevelProblem, i: int, x, y, draws: NeumannDraws) -> np.ndarray:
    """Minibatch mean of the per-draw estimates."""
    return hypergrad_draws(problem, i, x, y, draws).mean(axis=0)


def hypergrad_stoch(problem: BilevelProblem, i: int, x, y, K: int,
                    rng: np.random.Generator) -> np.ndarray:
    """One stochastic hypergradient draw using the agent's stream ``rng``."""
    return hypergrad_draws(problem, i, x, y, draw_neumann(rng, problem.n, K, 1))[0]


def bias_bound(c: ProblemConstants, K: int) -> float:
    """Bound on the bias of the K-term stochastic estimator."""
    if K < 0:
        raise ValueError("K must be nonnegative")
    return c.C_gxy * c.C_fy / c.mu_g * (1.0 - c.mu_g / c.L_g) ** K


# ---------------------------------------------------------------------------
# Lipschitz constants


@dataclass(frozen=True)
class DerivedConstants:
    """Squared-Lipschitz constants ``L_f, L_ell, L_y`` and ``L_K`` terms.

    ``L_Kd`` and ``L_Ks`` are the unsquared constants (their squares are what
    the closed forms give). ``L_Ks`` is None in deterministic mode.
    """

    L_f: float
    L_ell: float
    L_y: float
    L_Kd: float
    L_Ks: float | None
    K: int | None

    @property
    def L_K(self) -> float:
        return self.L_Kd if self.L_Ks is None else max(self.L_Kd, self.L_Ks)


def L_Ks_of(c: ProblemConstants, K: int) -> float:
    mu, L = c.mu_g, c.L_g
    lin = K / (2.0 * mu * L - mu * mu)
    sq = (2.0 * c.L_fx ** 2
          + 6.0 * c.C_gxy ** 2 * c.L_fy ** 2 * lin
          + 6.0 * c.C_fy ** 2 * c.L_gxy ** 2 * lin
          + 6.0 * c.C_gxy ** 2 * c.C_fy ** 2 * K ** 4 / L ** 2 / L ** 2 * c.L_gyy ** 2)
    return math.sqrt(sq)


def derived_constants(c: ProblemConstants, K: int | None = None) -> DerivedConstants:
    mu = c.mu_g
    ratio = c.C_gxy / mu
    L_f = (c.L_fx + c.L_fy * ratio + c.C_fy * (c.L_gxy / mu + c.L_gyy * c.C_gxy / mu ** 2)) ** 2
    # literal form of the displayed constant (L_f, not its square root)
    L_ell = (L_f + L_f * ratio) ** 2
    L_y = ratio ** 2
    L_Kd_sq = (2.0 * c.L_fx ** 2
               + 6.0 * c.C_gxy ** 2 * c.L_fy ** 2 / mu ** 2
               + 6.0 * c.C_fy ** 2 * c.L_gxy ** 2 / mu ** 2
               + 6.0 * c.C_gxy ** 2 * c.C_fy ** 2 * c.L_gyy ** 2 / mu ** 4)
    L_Ks = None if K is None else L_Ks_of(c, K)
    return DerivedConstants(L_f=L_f, L_ell=L_ell, L_y=L_y, L_Kd=math.sqrt(L_Kd_sq), L_Ks=L_Ks, K=K)


# ---------------------------------------------------------------------------
# Step-size clauses


class Theorem(str, Enum):
    INTERACT = "interact"
    SVR = "svr"


@dataclass(frozen=True)
class Clause:
    target: str  # "alpha" or "beta"
    label: str
    value: float


@dataclass(frozen=True)
class StepSizes:
    alpha: float
    beta: float
    r: float
    clauses: tuple[Clause, ...] = field(default=(), repr=False)


def _div(num: float, den: float) -> float:
    """Clause ratio; a vanishing denominator imposes no constraint."""
    if den == 0:
        return math.inf
    return num / den


def r_of(beta: float, c: ProblemConstants) -> float:
    mu, L = c.mu_g, c.L_g
    return beta * mu * L / (3.0 * (mu + L))


def beta_clauses(c: ProblemConstants, dc: DerivedConstants, lam: float,
                 variant: Theorem) -> list[Clause]:
    mu, L = c.mu_g, c.L_g
    s = mu + L
    gap = 1.0 - lam
    LK2 = dc.L_K ** 2
    if variant == Theorem.INTERACT:
        rows = [
            ("3(mu+L)/(mu L)", 3.0 * s / (mu * L)),
            ("1/(mu+L)", 1.0 / s),
        ]
    else:
        rows = [
            ("(1-lam) mu L/(768 LK^2 (mu+L))", _div(gap * mu * L, 768.0 * LK2 * s)),
            ("(1-lam)(mu+L)/(4096 LK^2)", _div(gap * s, 4096.0 * LK2)),
            ("3(mu+L)/(mu L)", 3.0 * s / (mu * L)),
            ("Ly^2 mu L/(24 LK^2 (mu+L))", _div(dc.L_y ** 2 * mu * L, 24.0 * LK2 * s)),
            ("(1-lam)(mu+L)/(512 LK^2)", _div(gap * s, 512.0 * LK2)),
            ("1/(2(mu+L))", 1.0 / (2.0 * s)),
            ("16/((1-lam)(mu+L))", 16.0 / (gap * s)),
        ]
    return [Clause("beta", lab, float(v)) for lab, v in rows]


def alpha_clauses(c: ProblemConstants, dc: DerivedConstants, lam: float, m: int,
                  beta: float, variant: Theorem) -> list[Clause]:
    mu, L = c.mu_g, c.L_g
    s = mu + L
    gap = 1.0 - lam
    r = r_of(beta, c)
    LK, LK2 = dc.L_K, dc.L_K ** 2
    Ll, Lf, Ly = dc.L_ell, dc.L_f, dc.L_y
    Ly2 = Ly ** 2
    if variant == Theorem.INTERACT:
        rows = [
            ("1/(4 Lell)", _div(1.0, 4.0 * Ll)),
            ("sqrt((1-lam)/(2m))/(4 LK)", _div(math.sqrt(gap / (2.0 * m)), 4.0 * LK)),
            ("1/(m(1-lam))", 1.0 / (m * gap)),
            ("(1-lam)^2/(32 LK^2)", _div(gap ** 2, 32.0 * LK2)),
            ("m(1-lam)/(4 Lell)", _div(m * gap, 4.0 * Ll)),
            ("9 r^2 m (1-lam)/(32 Ly^2 (1+1/r) Lf^2)",
             _div(9.0 * r ** 2 * m * gap, 32.0 * Ly2 * (1.0 + 1.0 / r) * Lf ** 2)),
            ("(1-r)(1+r) r (1-lam)^2/(32 Ly^2 (mu+L) LK^2 beta)",
             _div((1.0 - r) * (1.0 + r) * r * gap ** 2, 32.0 * Ly2 * s * LK2 * beta)),
            ("(1-lam)/(4 LK)", _div(gap, 4.0 * LK)),
            ("1", 1.0),
        ]
    else:
        rows = [
            ("1/(8 Lell)", _div(1.0, 8.0 * Ll)),
            ("r/(16 m Ly^2 (r+1))", _div(r, 16.0 * m * Ly2 * (r + 1.0))),
            ("1/(8 LK sqrt(m))", _div(1.0, 8.0 * LK * math.sqrt(m))),
            ("1/(m(1-lam))", 1.0 / (m * gap)),
            ("(1-lam)^2/(128 LK^2)", _div(gap ** 2, 128.0 * LK2)),
            ("(1-lam)/4 * m/(Lell + 16 LK^2 m)", gap / 4.0 * _div(m, Ll + 16.0 * LK2 * m)),
            ("sqrt((1-lam)/m)/(16 LK)", _div(math.sqrt(gap / m), 16.0 * LK)),
            ("288 r (1+r) m Ly^2/((1-lam) Lf^2)", _div(288.0 * r * (1.0 + r) * m * Ly2, gap * Lf ** 2)),
            ("r(1+r)(1-lam)/(256 Ly^2 (mu+L) LK^2 beta)",
             _div(r * (1.0 + r) * gap, 256.0 * Ly2 * s * LK2 * beta)),
            ("r(1+r)(1-lam)^2/(512 Ly^2 (mu+L) LK^2 beta)",
             _div(r * (1.0 + r) * gap ** 2, 512.0 * Ly2 * s * LK2 * beta)),
            ("sqrt(1-lam)/(8 LK)", _div(math.sqrt(gap), 8.0 * LK)),
            ("(1-lam)^2/4", gap ** 2 / 4.0),
            ("32 Ly^2/(16 (1+1/r) Ly^2)", _div(32.0 * Ly2, 16.0 * (1.0 + 1.0 / r) * Ly2)),
            ("sqrt((1-lam)/(64 LK^2))", math.sqrt(_div(gap, 64.0 * LK2))),
            ("32 Ly^2/(1-lam)", 32.0 * Ly2 / gap),
        ]
    return [Clause("alpha", lab, float(v)) for lab, v in rows]


def stepsize_bounds(dc: DerivedConstants, c: ProblemConstants, lam: float, m: int,
                    variant: Theorem | str = Theorem.INTERACT) -> StepSizes:
    """Largest ``(alpha, beta)`` admitted by every clause of the chosen theorem.

    ``beta`` is the minimum over its clauses; ``r`` follows from ``beta``;
    ``alpha`` is the minimum over its clauses evaluated at that ``beta``.
    Clauses whose denominator vanishes impose no constraint.
    """
    variant = Theorem(variant)
    if not (0.0 <= lam < 1.0):
        raise ValueError(f"lambda must lie in [0, 1), got {lam}")
    bc = beta_clauses(c, dc, lam, variant)
    beta = min(cl.value for cl in bc)
    ac = alpha_clauses(c, dc, lam, m, beta, variant)
    positive = [cl.value for cl in ac if cl.value > 0]
    alpha = min(cl.value for cl in ac)
    if not (beta > 0 and np.isfinite(beta)):
        raise ValueError(f"beta clauses give a non-positive bound ({beta})")
    if not alpha > 0:
        # a clause proportional to L_y^2 vanishes when the cross Hessian is zero
        zero = [cl.label for cl in ac if cl.value <= 0]
        log.warning("alpha clauses %s evaluate to zero; ignoring them", zero)
        alpha = min(positive)
    for cl in bc + ac:
        log.debug("%s <= %-55s = %.6g", cl.target, cl.label, cl.value)
    return StepSizes(alpha=float(alpha), beta=float(beta), r=r_of(beta, c), clauses=tuple(bc + ac))
