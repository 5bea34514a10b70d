"""Log-domain numerics: jittered Cholesky, logsumexp, densities, kernels, RNG streams."""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy import special

from . import _kernels
from .errors import AllNegInfinity, DomainError, NotPositiveDefinite

LOG_2PI = float(np.log(2.0 * np.pi))
JITTER_SCHEDULE = (0.0, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3)


def _finite(name, *arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise DomainError(f"{name}: non-finite input")


# --- positive definite matrices -------------------------------------------


@dataclass(frozen=True)
class PsdMat:
    """A symmetric PSD matrix together with its (jittered) lower Cholesky factor."""

    matrix: np.ndarray
    factor: np.ndarray
    jitter: float = 0.0

    @property
    def dim(self):
        return self.matrix.shape[0]

    def solve(self, b):
        """M^{-1} b (uses the jittered factor)."""
        return sla.cho_solve((self.factor, True), b)

    def half_solve(self, b):
        """L^{-1} b."""
        return sla.solve_triangular(self.factor, b, lower=True)

    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.factor))))

    def inverse(self):
        return self.solve(np.eye(self.dim))


def cholesky(m, symmetry_tol=1e-8):
    """Lower Cholesky factor with the smallest jitter from the schedule that works.

    Raises
    ------
    DomainError
        ``m`` is not square, not finite, or asymmetric beyond ``symmetry_tol``.
    NotPositiveDefinite
        Factorization fails even with 1e-3 added to the diagonal.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DomainError(f"cholesky: expected a square matrix, got shape {m.shape}")
    _finite("cholesky", m)
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if m.size and np.max(np.abs(m - m.T)) > symmetry_tol * scale:
        raise DomainError("cholesky: matrix is not symmetric")
    sym = 0.5 * (m + m.T)
    eye = np.eye(m.shape[0])
    for jitter in JITTER_SCHEDULE:
        try:
            factor = np.linalg.cholesky(sym + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(factor)) and np.all(np.diag(factor) > 0):
            return PsdMat(sym, factor, jitter)
    raise NotPositiveDefinite(
        f"cholesky failed with jitter up to {JITTER_SCHEDULE[-1]:g}"
    )


# --- log-domain reductions --------------------------------------------------


def logsumexp(v, axis=None):
    """log(sum(exp(v))) with a max shift.  Raises AllNegInfinity if every entry is -inf."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise DomainError("logsumexp: empty input")
    if np.any(np.isnan(v)) or np.any(v == np.inf):
        raise DomainError("logsumexp: NaN or +inf entry")
    vmax = np.max(v, axis=axis, keepdims=True)
    if np.any(vmax == -np.inf):
        raise AllNegInfinity("logsumexp: all entries are -inf")
    out = np.log(np.sum(np.exp(v - vmax), axis=axis, keepdims=True)) + vmax
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


# --- densities --------------------------------------------------------------


def mvn_logpdf(x, mean, cov):
    """Full-covariance Gaussian log density.

    ``x`` and ``mean`` broadcast against each other with the event on the last
    axis; ``cov`` is a :class:`PsdMat` or a plain matrix.  Returns the log
    density and a dict of gradients with keys ``x``, ``mean`` and ``cov``
    (``cov`` is the symmetric gradient summed over the batch).
    """
    if not isinstance(cov, PsdMat):
        cov = cholesky(cov)
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    _finite("mvn_logpdf", x, mean)
    r = x - mean
    d = cov.dim
    alpha = cov.solve(r.reshape(-1, d).T).T.reshape(r.shape)
    quad = np.sum(r * alpha, axis=-1)
    lp = -0.5 * quad - 0.5 * (d * LOG_2PI + cov.logdet())
    flat = alpha.reshape(-1, d)
    n = flat.shape[0]
    gcov = 0.5 * (flat.T @ flat) - 0.5 * n * cov.inverse()
    return lp, {"x": -alpha, "mean": alpha, "cov": gcov}


def diag_normal_logpdf(x, mean, log_scale):
    """Independent Gaussians N(mean, exp(log_scale)^2), summed over the last axis."""
    x, mean, log_scale = (np.asarray(a, dtype=float) for a in (x, mean, log_scale))
    _finite("diag_normal_logpdf", x, mean, log_scale)
    inv = np.exp(-log_scale)
    z = (x - mean) * inv
    lp = np.sum(-0.5 * z * z - log_scale - 0.5 * LOG_2PI, axis=-1)
    gx = -z * inv
    return lp, {"x": gx, "mean": -gx, "log_scale": z * z - 1.0}


def student_t_logpdf(r, nu, scale):
    """Location-zero Student's t, independent per coordinate, summed over the last axis."""
    r = np.asarray(r, dtype=float)
    _finite("student_t_logpdf", r)
    if not (np.all(np.asarray(nu) > 0) and np.all(np.asarray(scale) > 0)):
        raise DomainError("student_t_logpdf: nu and scale must be positive")
    z2 = (r / scale) ** 2
    base = 1.0 + z2 / nu
    per = (
        special.gammaln(0.5 * (nu + 1.0))
        - special.gammaln(0.5 * nu)
        - 0.5 * np.log(nu * np.pi)
        - np.log(scale)
        - 0.5 * (nu + 1.0) * np.log(base)
    )
    gr = -(nu + 1.0) * r / (nu * scale * scale + r * r)
    gnu = 0.5 * (
        special.digamma(0.5 * (nu + 1.0))
        - special.digamma(0.5 * nu)
        - 1.0 / nu
        - np.log(base)
        + (nu + 1.0) * z2 / (nu * nu * base)
    )
    gscale = (-1.0 + (nu + 1.0) * z2 / (nu * base)) / scale
    return np.sum(per, axis=-1), {
        "x": gr,
        "nu": np.sum(gnu, axis=-1),
        "scale": np.sum(gscale, axis=-1),
    }


def poisson_logpmf(k, log_rate):
    """Poisson log-pmf with a log-link rate, summed over the last axis."""
    k = np.asarray(k, dtype=float)
    log_rate = np.asarray(log_rate, dtype=float)
    _finite("poisson_logpmf", k, log_rate)
    if np.any(k < 0) or np.any(k != np.floor(k)):
        raise DomainError("poisson_logpmf: counts must be nonnegative integers")
    rate = np.exp(log_rate)
    lp = np.sum(k * log_rate - rate - special.gammaln(k + 1.0), axis=-1)
    return lp, {"log_rate": k - rate}


_FAMILIES = {
    "gaussian": lambda x, p: mvn_logpdf(x, p.get("mean", 0.0), p["cov"]),
    "diag_gaussian": lambda x, p: diag_normal_logpdf(x, p.get("mean", 0.0), p["log_scale"]),
    "student_t": lambda x, p: student_t_logpdf(np.asarray(x) - p.get("loc", 0.0), p["nu"], p["scale"]),
    "poisson": lambda k, p: poisson_logpmf(k, p["log_rate"]),
}


def density_logpdf_and_grad(family, x, **params):
    """Dispatch to one of the supported families by name.

    ``family`` is one of ``gaussian``, ``diag_gaussian``, ``student_t`` or
    ``poisson``.  Returns ``(logpdf, grads)``.
    """
    try:
        fn = _FAMILIES[family]
    except KeyError:
        raise DomainError(f"unknown density family {family!r}") from None
    return fn(x, params)


# --- kernels ----------------------------------------------------------------


def se_kernel(x, xp, lengthscale, variance):
    """Squared-exponential covariance between two points (or row-wise batches)."""
    if lengthscale <= 0 or variance <= 0:
        raise DomainError("se_kernel: hyperparameters must be positive")
    x = np.asarray(x, dtype=float)
    xp = np.asarray(xp, dtype=float)
    if x.shape[-1] != xp.shape[-1]:
        raise DomainError("se_kernel: dimension mismatch")
    d2 = np.sum((x - xp) ** 2, axis=-1)
    return variance * np.exp(-0.5 * d2 / lengthscale**2)


def se_gram(x, u, lengthscale, variance):
    """Cross-covariance matrix k(x_i, u_j) for row-stacked inputs."""
    if lengthscale <= 0 or variance <= 0:
        raise DomainError("se_gram: hyperparameters must be positive")
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=float)
    u = np.ascontiguousarray(np.atleast_2d(u), dtype=float)
    return _kernels.se_cross(x, u, float(lengthscale), float(variance))


# --- random streams ---------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _mix(a, b):
    # splitmix64-style finalizer; keeps substream keys well separated
    z = (a * 0x9E3779B97F4A7C15 + b + 0x632BE59BD9B4E019) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (seed, stream id).

    Backed by numpy's Philox bit generator, so draws depend only on
    ``(seed, stream, counter)`` and never on call history elsewhere.
    """

    seed: int
    stream: int = 0
    counter: int = field(default=0)

    def generator(self):
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        counter = np.array([0, 0, 0, self.counter & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def substream(self, index):
        return RngStream(self.seed, _mix(self.stream, int(index)), 0)

    def advance(self, n=1):
        return RngStream(self.seed, self.stream, self.counter + n)


def as_generator(rng):
    """Accept an RngStream, a Generator or an int seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return RngStream(int(rng)).generator()
