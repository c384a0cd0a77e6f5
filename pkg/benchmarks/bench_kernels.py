"""Time the numba kernels against their pure-numpy fallbacks.

Usage: python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import timeit

import numpy as np

from decbilevel import _kernels


def _cases(rng):
    n, d1, d2, S, K = 1000, 8, 8, 32, 10
    a = rng.standard_normal((n, d2, d2))
    hyy = np.einsum("nab,ncb->nac", a, a) / d2 + np.eye(d2)
    hxy = rng.standard_normal((n, d1, d2))
    gx = rng.standard_normal((S, d1))
    gy = rng.standard_normal((S, d2))
    zeta0 = rng.integers(n, size=S)
    ks = rng.integers(K, size=S)
    zetas = rng.integers(n, size=(S, K - 1))
    L = float(np.max(np.linalg.eigvalsh(hyy)))
    neumann = (gx, gy, hyy, hxy, zeta0, ks, zetas, K, L)

    m = 20
    w = rng.random((m, m)) < 0.3
    w = np.triu(w, 1)
    w = (w | w.T | np.eye(m, dtype=bool)).astype(float)
    w /= w.sum(axis=1, keepdims=True)
    indptr = np.concatenate([[0], np.cumsum((w > 0).sum(axis=1))]).astype(np.int64)
    indices = np.nonzero(w)[1].astype(np.int64)
    weights = w[w > 0]
    mixing = (indptr, indices, weights, rng.standard_normal((m, d1)))

    matvec = (hxy, rng.integers(n, size=S), rng.standard_normal(d2))
    return {"neumann_draws": neumann, "mix": mixing, "batch_matvec_mean": matvec}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':20s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}  max|diff|")
    for name, args_ in cases.items():
        fn_np = getattr(_kernels, f"{name}_numpy")
        fn_nb = getattr(_kernels, f"{name}_numba")
        fn_nb(*args_)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: fn_np(*args_), number=args.number, repeat=args.repeat))
        t_nb = min(timeit.repeat(lambda: fn_nb(*args_), number=args.number, repeat=args.repeat))
        diff = float(np.max(np.abs(fn_np(*args_) - fn_nb(*args_))))
        us_np, us_nb = 1e6 * t_np / args.number, 1e6 * t_nb / args.number
        print(f"{name:20s} {us_np:10.2f} {us_nb:10.2f} {us_np / us_nb:7.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
