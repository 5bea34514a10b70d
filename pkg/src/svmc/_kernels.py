"""Hot inner loops, in a numba flavour and a pure-numpy flavour.

Set ``SVMC_NUMBA=0`` in the environment to force the numpy path.  Both
flavours are always importable (``*_numpy`` and ``*_numba`` names) so the
benchmark and the equivalence tests can compare them side by side; the
unsuffixed names are the ones the rest of the package calls.
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SVMC_NUMBA", "1").lower() not in ("0", "false", "no")


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# --- resampling -----------------------------------------------------------


def systematic_ancestors_numpy(cumw, u0, n):
    positions = (u0 + np.arange(n)) / n
    idx = np.searchsorted(cumw, positions, side="right")
    return np.minimum(idx, cumw.shape[0] - 1)


def _systematic_ancestors_loop(cumw, u0, n):
    m = cumw.shape[0]
    out = np.empty(n, dtype=np.int64)
    j = 0
    for i in range(n):
        pos = (u0 + i) / n
        while j < m - 1 and cumw[j] <= pos:
            j += 1
        out[i] = j
    return out


systematic_ancestors_numba = _njit(_systematic_ancestors_loop)


# --- squared-exponential cross covariance ---------------------------------


def se_cross_numpy(x, u, lengthscale, variance):
    d2 = (
        np.sum(x * x, axis=1)[:, None]
        + np.sum(u * u, axis=1)[None, :]
        - 2.0 * (x @ u.T)
    )
    np.maximum(d2, 0.0, out=d2)
    return variance * np.exp(-0.5 * d2 / (lengthscale * lengthscale))


def _se_cross_loop(x, u, lengthscale, variance):
    n, d = x.shape
    m = u.shape[0]
    out = np.empty((n, m))
    inv = 0.5 / (lengthscale * lengthscale)
    for i in range(n):
        for j in range(m):
            s = 0.0
            for k in range(d):
                diff = x[i, k] - u[j, k]
                s += diff * diff
            out[i, j] = variance * np.exp(-s * inv)
    return out


se_cross_numba = _njit(_se_cross_loop)


# --- per-particle sparse-GP moments and rank-one conditioning --------------


def gp_moments_numpy(a, gamma, mu, sigma_z2):
    """Return (A mu, a^T (Gamma + sigma_z2 I) a) for every particle."""
    corr = np.einsum("nm,nmd->nd", a, mu)
    quad = np.einsum("nm,nmk,nk->n", a, gamma, a) + sigma_z2 * np.sum(a * a, axis=1)
    return corr, quad


def _gp_moments_loop(a, gamma, mu, sigma_z2):
    n, m = a.shape
    d = mu.shape[2]
    corr = np.zeros((n, d))
    quad = np.zeros(n)
    for i in range(n):
        for j in range(m):
            aj = a[i, j]
            for k in range(d):
                corr[i, k] += aj * mu[i, j, k]
            row = 0.0
            for l in range(m):
                row += gamma[i, j, l] * a[i, l]
            quad[i] += aj * row + sigma_z2 * aj * aj
    return corr, quad


gp_moments_numba = _njit(_gp_moments_loop)


def gp_update_numpy(a, gamma, mu, c, innov, sigma_z2):
    """Inflate by the diffusion then condition each belief on one transition.

    Joseph-form rank-one update: with G = Gamma + sigma_z2 I, g = G a,
    s = c + a.g and k = g / s,
    Gamma' = G - k g^T - g k^T + s k k^T,  mu' = mu + k innov^T.
    """
    m = a.shape[1]
    g = np.einsum("nmk,nk->nm", gamma, a) + sigma_z2 * a
    s = c + np.sum(a * g, axis=1)
    k = g / s[:, None]
    new_gamma = (
        gamma
        + sigma_z2 * np.eye(m)[None, :, :]
        - k[:, :, None] * g[:, None, :]
        - g[:, :, None] * k[:, None, :]
        + s[:, None, None] * k[:, :, None] * k[:, None, :]
    )
    new_mu = mu + k[:, :, None] * innov[:, None, :]
    return new_gamma, new_mu


def _gp_update_loop(a, gamma, mu, c, innov, sigma_z2):
    n, m = a.shape
    d = mu.shape[2]
    new_gamma = np.empty_like(gamma)
    new_mu = np.empty_like(mu)
    g = np.empty(m)
    k = np.empty(m)
    for i in range(n):
        s = c[i]
        for j in range(m):
            acc = sigma_z2 * a[i, j]
            for l in range(m):
                acc += gamma[i, j, l] * a[i, l]
            g[j] = acc
            s += a[i, j] * acc
        for j in range(m):
            k[j] = g[j] / s
        for j in range(m):
            for l in range(m):
                val = gamma[i, j, l] - k[j] * g[l] - g[j] * k[l] + s * k[j] * k[l]
                if j == l:
                    val += sigma_z2
                new_gamma[i, j, l] = val
            for q in range(d):
                new_mu[i, j, q] = mu[i, j, q] + k[j] * innov[i, q]
    return new_gamma, new_mu


gp_update_numba = _njit(_gp_update_loop)


if USE_NUMBA:
    systematic_ancestors = systematic_ancestors_numba
    se_cross = se_cross_numba
    gp_moments = gp_moments_numba
    gp_update = gp_update_numba
else:
    systematic_ancestors = systematic_ancestors_numpy
    se_cross = se_cross_numpy
    gp_moments = gp_moments_numpy
    gp_update = gp_update_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
