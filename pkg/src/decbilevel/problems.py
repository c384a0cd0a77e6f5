"""Bilevel problems: oracle interface and the synthetic quadratic family.

Each agent ``i`` holds ``n`` samples. The inner objective ``g_i(x, .)`` is
strongly convex in ``y``; the outer objective ``f_i`` may be nonconvex in
``x``. Oracles return batch means over a set of sample indices, or the full
local mean when ``batch`` is None.

Orientation convention: the cross Hessian ``hess_xy`` is the d1 x d2 matrix
``d/dx (grad_y g)^T``, so the implicit hypergradient reads
``grad_x f - hess_xy @ inv(hess_yy) @ grad_y f``.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from decbilevel import _kernels
from decbilevel.rng import TAG_PROBLEM, make_rng


class OracleError(RuntimeError):
    """An oracle could not produce a finite answer (assumption violated)."""


@dataclass(frozen=True)
class ProblemConstants:
    """Assumption constants of a problem instance.

    ``C_gxy`` is an unsquared operator-norm bound on the cross Hessian and
    ``C_fy`` bounds ``|grad_y f|`` on the iterate region the constants were
    computed for.
    """

    mu_g: float
    L_g: float
    C_gxy: float
    C_fy: float
    L_fx: float
    L_fy: float
    L_gxy: float
    L_gyy: float

    def __post_init__(self):
        if not self.mu_g > 0:
            raise ValueError(f"mu_g must be positive, got {self.mu_g}")
        if self.L_g < self.mu_g:
            raise ValueError(f"L_g={self.L_g} is below mu_g={self.mu_g}")
        for name, val in asdict(self).items():
            if val < 0 or not np.isfinite(val):
                raise ValueError(f"{name} must be finite and nonnegative, got {val}")


class BilevelProblem(ABC):
    """Per-agent, per-sample outer ``f_i`` and inner ``g_i`` with oracles.

    Subclasses provide values, gradients and dense Hessians; hvps, the inner
    solve and the true global hypergradient have generic defaults.
    """

    m: int
    n: int
    d1: int
    d2: int
    mu_g: float
    L_g: float

    # -- required oracles -------------------------------------------------
    @abstractmethod
    def outer_value(self, i: int, x, y, batch=None) -> float: ...

    @abstractmethod
    def inner_value(self, i: int, x, y, batch=None) -> float: ...

    @abstractmethod
    def outer_grads(self, i: int, x, y, batch=None) -> tuple[np.ndarray, np.ndarray]:
        """Batch mean of ``(grad_x f_i, grad_y f_i)``."""

    @abstractmethod
    def inner_grad(self, i: int, x, y, batch=None) -> np.ndarray:
        """Batch mean of ``grad_y g_i``."""

    @abstractmethod
    def hess_yy(self, i: int, x, y, batch=None) -> np.ndarray:
        """Batch mean of the d2 x d2 inner Hessian in ``y``."""

    @abstractmethod
    def hess_xy(self, i: int, x, y, batch=None) -> np.ndarray:
        """Batch mean of the d1 x d2 cross Hessian."""

    @abstractmethod
    def hessian_stacks(self, i: int, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample ``(hess_yy, hess_xy)`` stacks of shape (n, d2, d2), (n, d1, d2)."""

    @abstractmethod
    def constants(self, region_radius: float) -> ProblemConstants: ...

    # -- derived oracles --------------------------------------------------
    def outer_grads_samples(self, i: int, x, y, idx) -> tuple[np.ndarray, np.ndarray]:
        """Single-sample outer gradients for each index, shapes (S, d1), (S, d2)."""
        pairs = [self.outer_grads(i, x, y, (j,)) for j in np.asarray(idx).reshape(-1)]
        return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])

    def hvp_yy(self, i: int, x, y, batch, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.d2,):
            raise ValueError(f"expected a length-{self.d2} vector, got shape {v.shape}")
        return self.hess_yy(i, x, y, batch) @ v

    def hvp_xy(self, i: int, x, y, batch, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.d2,):
            raise ValueError(f"expected a length-{self.d2} vector, got shape {v.shape}")
        return self.hess_xy(i, x, y, batch) @ v

    def hess_yy_factor(self, i: int, x, y):
        """Cholesky factor of the full-batch inner Hessian, for ``cho_solve``."""
        try:
            return cho_factor(self.hess_yy(i, x, y), lower=True, check_finite=True)
        except (LinAlgError, ValueError) as exc:
            raise OracleError(f"agent {i}: inner Hessian is not positive definite") from exc

    def inner_opt(self, i: int, x, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
        """Minimize ``g_i(x, .)`` by gradient descent with step ``1/L_g``."""
        y = np.zeros(self.d2)
        step = 1.0 / self.L_g
        for _ in range(max_iter):
            g = self.inner_grad(i, x, y)
            if np.linalg.norm(g) <= tol:
                return y
            y = y - step * g
        raise OracleError(f"agent {i}: inner solve did not reach |grad| <= {tol} in {max_iter} steps")

    def local_hypergrad(self, i: int, x, y) -> np.ndarray:
        """Full-batch approximate hypergradient at ``(x, y)``."""
        gx, gy = self.outer_grads(i, x, y)
        z = cho_solve(self.hess_yy_factor(i, x, y), gy, check_finite=False)
        return gx - self.hess_xy(i, x, y) @ z

    def ell(self, x) -> float:
        """Global outer loss ``(1/m) sum_i f_i(x, y*_i(x))``."""
        return float(np.mean([self.outer_value(i, x, self.inner_opt(i, x)) for i in range(self.m)]))

    def true_global_grad(self, x) -> np.ndarray:
        """``(1/m) sum_i grad ell_i(x)`` with each inner problem solved."""
        x = np.asarray(x, dtype=float)
        acc = np.zeros(self.d1)
        for i in range(self.m):
            acc += self.local_hypergrad(i, x, self.inner_opt(i, x))
        return acc / self.m

    # -- helpers ----------------------------------------------------------
    def _check_batch(self, batch):
        if batch is None:
            return None
        idx = np.asarray(batch, dtype=np.int64).reshape(-1)
        if idx.size == 0:
            raise ValueError("batch must be nonempty")
        if idx.min() < 0 or idx.max() >= self.n:
            raise IndexError(f"sample index out of range [0, {self.n})")
        return idx


def _random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


class SyntheticQuadratic(BilevelProblem):
    """Quadratic inner, quadratic-plus-sine outer.

    ``g_i(x, y; j) = 1/2 y^T A_ij y - y^T (B_ij x + c_ij)``
    ``f_i(x, y; j) = 1/2 |C_ij x|^2 + 1/2 |y - e_ij|^2 + gamma * sum_k sin(x_k)``

    Arrays are indexed ``[agent, sample, ...]``. ``mu_g`` and ``L_g`` are
    the nominal spectrum bounds; when omitted they default to the extreme
    eigenvalues of the supplied ``A``. ``L_g`` also scales the Neumann
    estimator, so every ``A_ij`` must have spectrum within ``[mu_g, L_g]``.
    """

    def __init__(self, A, B, c, C, e, gamma=0.0, mu_g=None, L_g=None, meta=None):
        A = np.asarray(A, dtype=float)
        B = np.asarray(B, dtype=float)
        self.m, self.n, self.d2 = A.shape[:3]
        self.d1 = B.shape[3]
        self.A = A
        self.B = B
        self.c = np.asarray(c, dtype=float).reshape(self.m, self.n, self.d2)
        self.C = np.asarray(C, dtype=float).reshape(self.m, self.n, self.d1, self.d1)
        self.e = np.asarray(e, dtype=float).reshape(self.m, self.n, self.d2)
        if A.shape != (self.m, self.n, self.d2, self.d2) or B.shape != (self.m, self.n, self.d2, self.d1):
            raise ValueError("A must be (m, n, d2, d2) and B (m, n, d2, d1)")
        if not np.allclose(A, np.swapaxes(A, -1, -2), rtol=0, atol=1e-12):
            raise ValueError("every A_ij must be symmetric")
        self.gamma = float(gamma)
        self.meta = dict(meta or {})

        eig = np.linalg.eigvalsh(A)
        self._eig_min = float(eig.min())
        self._eig_max = float(eig.max())
        self.mu_g = self._eig_min if mu_g is None else float(mu_g)
        self.L_g = self._eig_max if L_g is None else float(L_g)
        if self.mu_g <= 0:
            raise ValueError(f"inner problem is not strongly convex (min eigenvalue {self._eig_min})")
        tol = 1e-9 * max(1.0, self.L_g)
        if self._eig_min < self.mu_g - tol or self._eig_max > self.L_g + tol:
            raise ValueError(
                f"sample spectra [{self._eig_min}, {self._eig_max}] exceed [{self.mu_g}, {self.L_g}]"
            )

        # sample-level caches used by the stochastic oracles
        self.Bt = np.ascontiguousarray(np.swapaxes(B, -1, -2))  # (m, n, d1, d2)
        self.neg_Bt = np.ascontiguousarray(-self.Bt)
        self.CtC = np.einsum("ijka,ijkb->ijab", self.C, self.C)
        # full-batch means
        self.A_bar = A.mean(axis=1)
        self.B_bar = B.mean(axis=1)
        self.c_bar = self.c.mean(axis=1)
        self.CtC_bar = self.CtC.mean(axis=1)
        self.e_bar = self.e.mean(axis=1)
        self._half_e2 = 0.5 * np.mean(np.sum(self.e * self.e, axis=-1), axis=1)
        self._chol = [cho_factor(self.A_bar[i], lower=True) for i in range(self.m)]

    # -- construction -----------------------------------------------------
    @classmethod
    def generate(
        cls,
        seed: int,
        m: int,
        n: int,
        d1: int,
        d2: int,
        mu_g: float = 1.0,
        L_g: float = 2.0,
        gamma: float = 0.5,
        heterogeneity: float = 2.0,
        sample_noise: float = 0.5,
    ) -> "SyntheticQuadratic":
        """Random instance keyed by ``(seed, m, n, d1, d2, mu_g, L_g, gamma)``.

        ``A_ij = Q^T diag(s) Q`` with ``s`` uniform on ``[mu_g, L_g]``.
        ``B``, ``C``, ``c`` and ``e`` are a per-agent component plus per-sample
        noise of relative size ``sample_noise``; the per-agent offsets of
        ``c`` and ``e`` are scaled by ``heterogeneity``.
        """
        if not (0 < mu_g <= L_g):
            raise ValueError(f"need 0 < mu_g <= L_g, got mu_g={mu_g}, L_g={L_g}")
        if gamma < 0:
            raise ValueError("gamma must be nonnegative")
        rng = make_rng(seed, TAG_PROBLEM)
        A = np.empty((m, n, d2, d2))
        for i in range(m):
            for j in range(n):
                q = _random_orthogonal(rng, d2)
                s = rng.uniform(mu_g, L_g, size=d2)
                a = (q.T * s) @ q
                A[i, j] = 0.5 * (a + a.T)
        B = (rng.standard_normal((m, 1, d2, d1))
             + sample_noise * rng.standard_normal((m, n, d2, d1))) / np.sqrt(d1)
        C = (rng.standard_normal((m, 1, d1, d1))
             + sample_noise * rng.standard_normal((m, n, d1, d1))) / np.sqrt(d1)
        c = heterogeneity * rng.standard_normal((m, 1, d2)) + sample_noise * rng.standard_normal((m, n, d2))
        e = heterogeneity * rng.standard_normal((m, 1, d2)) + sample_noise * rng.standard_normal((m, n, d2))
        meta = dict(seed=int(seed), m=m, n=n, d1=d1, d2=d2, mu_g=mu_g, L_g=L_g, gamma=gamma,
                    heterogeneity=heterogeneity, sample_noise=sample_noise)
        return cls(A, B, c, C, e,
                   gamma=gamma, mu_g=mu_g, L_g=L_g, meta=meta)

    def save(self, path: str | Path) -> None:
        """Write an ``.npz`` snapshot (arrays plus JSON metadata)."""
        meta = dict(self.meta, gamma=self.gamma, mu_g=self.mu_g, L_g=self.L_g)
        with open(path, "wb") as fh:
            np.savez(fh, A=self.A, B=self.B, c=self.c, C=self.C, e=self.e,
                     meta=np.array(json.dumps(meta, sort_keys=True)))

    @classmethod
    def load(cls, path: str | Path) -> "SyntheticQuadratic":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            return cls(z["A"], z["B"], z["c"], z["C"], z["e"], gamma=meta["gamma"],
                       mu_g=meta["mu_g"], L_g=meta["L_g"], meta=meta)

    # -- oracles ----------------------------------------------------------
    def outer_value(self, i, x, y, batch=None):
        idx = self._check_batch(batch)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if idx is None:
            quad = 0.5 * x @ self.CtC_bar[i] @ x + 0.5 * (y @ y) - y @ self.e_bar[i] + self._half_e2[i]
            return float(quad + self.gamma * np.sum(np.sin(x)))
        sel = slice(None) if idx is None else idx
        cx = np.einsum("jab,b->ja", self.C[i, sel], x)
        r = y - self.e[i, sel]
        quad = 0.5 * np.mean(np.sum(cx * cx, axis=1)) + 0.5 * np.mean(np.sum(r * r, axis=1))
        return float(quad + self.gamma * np.sum(np.sin(x)))

    def inner_value(self, i, x, y, batch=None):
        idx = self._check_batch(batch)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        sel = slice(None) if idx is None else idx
        ay = np.einsum("jab,b->ja", self.A[i, sel], y)
        lin = np.einsum("jab,b->ja", self.B[i, sel], x) + self.c[i, sel]
        return float(np.mean(0.5 * ay @ y - lin @ y))

    def outer_grads(self, i, x, y, batch=None):
        idx = self._check_batch(batch)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if idx is None:
            return self.CtC_bar[i] @ x + self.gamma * np.cos(x), y - self.e_bar[i]
        gx = _kernels.batch_matvec_mean(self.CtC[i], idx, x) + self.gamma * np.cos(x)
        return gx, y - self.e[i, idx].mean(axis=0)

    def outer_grads_samples(self, i, x, y, idx):
        idx = self._check_batch(idx)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        gx = np.einsum("sab,b->sa", self.CtC[i, idx], x) + self.gamma * np.cos(x)
        return gx, y - self.e[i, idx]

    def inner_grad(self, i, x, y, batch=None):
        idx = self._check_batch(batch)
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if idx is None:
            return self.A_bar[i] @ y - self.B_bar[i] @ x - self.c_bar[i]
        return (_kernels.batch_matvec_mean(self.A[i], idx, y)
                - _kernels.batch_matvec_mean(self.B[i], idx, x)
                - self.c[i, idx].mean(axis=0))

    def hess_yy(self, i, x, y, batch=None):
        idx = self._check_batch(batch)
        return self.A_bar[i].copy() if idx is None else self.A[i, idx].mean(axis=0)

    def hess_xy(self, i, x, y, batch=None):
        idx = self._check_batch(batch)
        return -self.B_bar[i].T.copy() if idx is None else self.neg_Bt[i, idx].mean(axis=0)

    def hessian_stacks(self, i, x, y):
        return self.A[i], self.neg_Bt[i]

    def hess_yy_factor(self, i, x, y):
        return self._chol[i]

    def inner_opt(self, i, x, tol=1e-10, max_iter=100_000):
        return cho_solve(self._chol[i], self.B_bar[i] @ np.asarray(x, dtype=float) + self.c_bar[i],
                         check_finite=False)

    def constants(self, region_radius: float = 10.0) -> ProblemConstants:
        """Exact assumption constants; ``C_fy`` holds for ``|y| <= region_radius``."""
        if region_radius <= 0:
            raise ValueError("region_radius must be positive")
        c_gxy = max(float(np.linalg.norm(self.B_bar[i], 2)) for i in range(self.m))
        c_fy = region_radius + float(np.max(np.linalg.norm(self.e, axis=-1)))
        l_fx = float(np.max(np.linalg.norm(self.CtC, ord=2, axis=(-2, -1)))) + self.gamma
        return ProblemConstants(mu_g=self._eig_min, L_g=self.L_g, C_gxy=c_gxy, C_fy=c_fy,
                                L_fx=l_fx, L_fy=1.0, L_gxy=0.0, L_gyy=0.0)


def scalar_instance(a: float = 1.0, b: float = 1.0, c: float = 0.0, cc: float = 1.0,
                    e: float = 0.0, gamma: float = 0.0, m: int = 1, L_g=None) -> SyntheticQuadratic:
    """One-dimensional, single-sample instance replicated on ``m`` agents.

    Defaults give ``g = y^2/2 - x y`` and ``f = (x^2 + y^2)/2``, for which
    ``y*(x) = x`` and ``grad ell(x) = 2x``.
    """
    one = np.ones((m, 1, 1, 1))
    return SyntheticQuadratic(a * one, b * one, c * np.ones((m, 1, 1)), cc * one,
                              e * np.ones((m, 1, 1)), gamma=gamma, L_g=L_g)
