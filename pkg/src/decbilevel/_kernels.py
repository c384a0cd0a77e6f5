"""Hot inner loops, in two interchangeable implementations.

The numba versions are used unless ``DECBILEVEL_DISABLE_NUMBA`` is set to a
truthy value (or numba is not importable); the pure-numpy versions are always
available under their ``*_numpy`` names so both paths can be tested and
benchmarked side by side.

All kernels reduce in a fixed order (ascending draw index, ascending
neighbor id) so results do not depend on the thread schedule.
"""

import os

import numpy as np

_FLAG = os.environ.get("DECBILEVEL_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not _DISABLED


# ---------------------------------------------------------------------------
# Neumann-series hypergradient draws


def neumann_draws_numpy(gx, gy, hyy, hxy, zeta0, ks, zetas, K, L):
    """Per-draw stochastic hypergradients.

    Parameters
    ----------
    gx, gy : (S, d1), (S, d2)
        Outer gradients at each draw's sample ``xi0``.
    hyy : (n, d2, d2)
        Per-sample inner Hessians in y.
    hxy : (n, d1, d2)
        Per-sample cross Hessians, d1 x d2 orientation.
    zeta0 : (S,) int
        Sample for the cross Hessian.
    ks : (S,) int
        Truncation index, uniform on ``0..K-1``.
    zetas : (S, K-1) int
        Samples for the product factors; only the first ``ks[s]`` are used.
    K : int
    L : float
        Hessian scaling (upper bound on the spectrum of ``hyy``).

    Returns
    -------
    (S, d1) array of ``gx - (K/L) hxy[zeta0] prod_j (I - hyy[zeta_j]/L) gy``.
    """
    v = np.array(gy, dtype=np.float64, copy=True)
    for j in range(K - 1):
        active = np.nonzero(ks > j)[0]
        if active.size == 0:
            break
        h = hyy[zetas[active, j]]
        v[active] -= np.einsum("sab,sb->sa", h, v[active]) / L
    return gx - (K / L) * np.einsum("sab,sb->sa", hxy[zeta0], v)


def mix_numpy(indptr, indices, weights, values):
    """Sparse row-wise weighted sum ``out_i = sum_j w_ij values_j``."""
    out = np.empty_like(values)
    for i in range(indptr.size - 1):
        lo, hi = indptr[i], indptr[i + 1]
        acc = weights[lo] * values[indices[lo]]
        for k in range(lo + 1, hi):
            acc = acc + weights[k] * values[indices[k]]
        out[i] = acc
    return out


def batch_matvec_mean_numpy(stack, idx, v):
    """``mean_s stack[idx[s]] @ v`` with a sequential sum over ``s``."""
    prods = np.einsum("sab,b->sa", stack[idx], v)
    acc = prods[0].copy()
    for s in range(1, prods.shape[0]):
        acc += prods[s]
    return acc / prods.shape[0]


if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True, fastmath=False)

    @_jit
    def neumann_draws_numba(gx, gy, hyy, hxy, zeta0, ks, zetas, K, L):
        S, d1 = gx.shape
        d2 = gy.shape[1]
        out = np.empty((S, d1))
        v = np.empty(d2)
        w = np.empty(d2)
        scale = K / L
        for s in range(S):
            for a in range(d2):
                v[a] = gy[s, a]
            for j in range(ks[s]):
                h = hyy[zetas[s, j]]
                for a in range(d2):
                    acc = 0.0
                    for b in range(d2):
                        acc += h[a, b] * v[b]
                    w[a] = acc
                for a in range(d2):
                    v[a] -= w[a] / L
            c = hxy[zeta0[s]]
            for a in range(d1):
                acc = 0.0
                for b in range(d2):
                    acc += c[a, b] * v[b]
                out[s, a] = gx[s, a] - scale * acc
        return out

    @_jit
    def mix_numba(indptr, indices, weights, values):
        m, d = values.shape
        out = np.empty((m, d))
        for i in range(m):
            for a in range(d):
                out[i, a] = 0.0
            lo = indptr[i]
            for k in range(lo, indptr[i + 1]):
                wk = weights[k]
                j = indices[k]
                if k == lo:
                    for a in range(d):
                        out[i, a] = wk * values[j, a]
                else:
                    for a in range(d):
                        out[i, a] = out[i, a] + wk * values[j, a]
        return out

    @_jit
    def batch_matvec_mean_numba(stack, idx, v):
        rows, cols = stack.shape[1], stack.shape[2]
        acc = np.zeros(rows)
        for s in range(idx.shape[0]):
            mat = stack[idx[s]]
            for a in range(rows):
                t = 0.0
                for b in range(cols):
                    t += mat[a, b] * v[b]
                acc[a] += t
        return acc / idx.shape[0]

else:  # pragma: no cover
    neumann_draws_numba = None
    mix_numba = None
    batch_matvec_mean_numba = None


if USE_NUMBA:
    neumann_draws = neumann_draws_numba
    mix = mix_numba
    batch_matvec_mean = batch_matvec_mean_numba
else:
    neumann_draws = neumann_draws_numpy
    mix = mix_numpy
    batch_matvec_mean = batch_matvec_mean_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
