"""Time the numba kernels against their pure-numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--repeat 200]

Shapes follow the desk-scale runs: 50 particles, an 8x8 inducing grid and a
2-D latent state for the GP kernels; 20000 particles for resampling.
"""

import argparse
import timeit

import numpy as np

from svmc import _kernels


def cases(rng):
    n, m, d = 50, 64, 2
    a = rng.standard_normal((n, m))
    b = rng.standard_normal((n, m, m))
    gamma = np.einsum("nij,nkj->nik", b, b) / m + np.eye(m)
    mu = rng.standard_normal((n, m, d))
    c = rng.random(n) + 0.1
    innov = rng.standard_normal((n, d))
    x = rng.standard_normal((n, d))
    u = rng.standard_normal((m, d))
    w = rng.random(20000)
    cumw = np.cumsum(w) / w.sum()
    return {
        "systematic_ancestors": (cumw, 0.37, cumw.size),
        "se_cross": (x, u, 1.0, 0.5),
        "gp_moments": (a, gamma, mu, 1e-4),
        "gp_update": (a, gamma, mu, c, innov, 1e-4),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    if not _kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy kernels exist")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy (us)':>12}{'numba (us)':>12}{'speedup':>9}  max |diff|")
    for name, inputs in cases(rng).items():
        f_np = getattr(_kernels, f"{name}_numpy")
        f_nb = getattr(_kernels, f"{name}_numba")
        out_np, out_nb = f_np(*inputs), f_nb(*inputs)  # also triggers compilation
        if not isinstance(out_np, tuple):
            out_np, out_nb = (out_np,), (out_nb,)
        diff = max(float(np.max(np.abs(np.asarray(p, float) - np.asarray(q, float)))) for p, q in zip(out_np, out_nb))
        t_np = min(timeit.repeat(lambda: f_np(*inputs), number=args.repeat, repeat=3)) / args.repeat * 1e6
        t_nb = min(timeit.repeat(lambda: f_nb(*inputs), number=args.repeat, repeat=3)) / args.repeat * 1e6
        print(f"{name:<22}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>8.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
