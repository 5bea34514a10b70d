"""Sequential Monte Carlo engine: resampling, weighting, diagnostics, estimators."""

import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import _kernels
from .errors import AllNegInfinity, DomainError, ProposalUnsupported
from .models import sample_transition, transition_logpdf_and_grad
from .numerics import as_generator, logsumexp
from .proposals import propose_reparam

SCHEMES = ("systematic", "multinomial")


@dataclass(frozen=True)
class SmcDiagnostics:
    ess: float
    log_ml_increment: float
    resample_performed: bool
    jitter: float = 0.0
    wall_us: float = 0.0


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    """Particles at one time step with unnormalized log-weights.

    ``aux`` carries per-particle payload that must follow ancestors under
    resampling (the sparse-GP beliefs); it is any object with a ``take``
    method.
    """

    states: np.ndarray
    log_weights: np.ndarray
    t: int = 0
    aux: Any = None
    diagnostics: SmcDiagnostics = None

    def __post_init__(self):
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        lw = np.asarray(self.log_weights, dtype=float).ravel()
        if states.shape[0] < 1 or lw.shape != (states.shape[0],):
            raise DomainError("ParticleCloud: need N >= 1 states and N log-weights")
        if np.any(np.isnan(lw)):
            raise DomainError("ParticleCloud: NaN log-weight")
        if np.all(lw == -np.inf):
            raise AllNegInfinity("ParticleCloud: every log-weight is -inf")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "log_weights", lw)

    @property
    def n(self):
        return self.states.shape[0]

    @property
    def dim(self):
        return self.states.shape[1]


def initial_cloud(model, n, rng, aux=None):
    """N draws from the initial-state prior with uniform weights (t = 0)."""
    rng = as_generator(rng)
    return ParticleCloud(model.sample_initial(n, rng), np.zeros(n), 0, aux)


def normalize_weights(log_weights):
    """Return (normalized weights, log of the mean unnormalized weight)."""
    lw = np.asarray(log_weights, dtype=float)
    lse = logsumexp(lw)
    w = np.exp(lw - lse)
    w /= w.sum()
    return w, lse - np.log(lw.size)


def effective_sample_size(weights):
    return float(1.0 / np.sum(np.square(weights)))


def resample(cloud_or_weights, scheme="systematic", rng=None, n=None):
    """Draw ancestor indices (0-based) proportional to the weights.

    ``cloud_or_weights`` is a ParticleCloud or an array of normalized
    weights.  ``n`` defaults to the number of particles.
    """
    if isinstance(cloud_or_weights, ParticleCloud):
        w, _ = normalize_weights(cloud_or_weights.log_weights)
    else:
        w = np.asarray(cloud_or_weights, dtype=float)
    n = w.size if n is None else int(n)
    rng = as_generator(rng)
    cumw = np.cumsum(w)
    cumw /= cumw[-1]
    if scheme == "systematic":
        return _kernels.systematic_ancestors(cumw, float(rng.random()), n)
    if scheme == "multinomial":
        idx = np.searchsorted(cumw, rng.random(n), side="right")
        return np.minimum(idx, w.size - 1)
    raise DomainError(f"unknown resampling scheme {scheme!r}")


def select_ancestors(cloud, scheme, rng, ess_threshold=None):
    """Ancestors plus the log-weight baseline new particles inherit.

    With resampling (the default, every step) the baseline is 0 for every
    particle.  With an ESS threshold and ESS above it, particles keep their
    index and carry N times their normalized weight forward.
    """
    w, _ = normalize_weights(cloud.log_weights)
    if ess_threshold is not None and effective_sample_size(w) >= ess_threshold * cloud.n:
        with np.errstate(divide="ignore"):
            return np.arange(cloud.n), np.log(w) + np.log(cloud.n), False
    return resample(w, scheme, rng), np.zeros(cloud.n), True


def finish_step(states, log_weights, t, aux, resampled, jitter, t_start):
    """Assemble the new cloud and its diagnostics from fresh log-weights."""
    if np.any(np.isnan(log_weights)):
        raise DomainError("NaN log-weight")
    if np.all(log_weights == -np.inf):
        raise ProposalUnsupported("every particle received zero weight")
    w, log_mean = normalize_weights(log_weights)
    diag = SmcDiagnostics(
        ess=effective_sample_size(w),
        log_ml_increment=float(log_mean),
        resample_performed=bool(resampled),
        jitter=float(jitter),
        wall_us=(time.perf_counter() - t_start) * 1e6,
    )
    return ParticleCloud(states, log_weights, t, aux, diag), diag


def smc_step(cloud, model, proposal, y, scheme="systematic", rng=None, ess_threshold=None):
    """One resample / propose / reweigh step with parametric dynamics.

    ``proposal=None`` is the bootstrap filter (sample from the transition);
    its log-weight is then exactly the emission log-density.  Otherwise the
    proposal is fed the transition mean as its dynamics feature.
    """
    t0 = time.perf_counter()
    rng = as_generator(rng)
    ancestors, baseline, resampled = select_ancestors(cloud, scheme, rng, ess_threshold)
    xp = cloud.states[ancestors]
    if proposal is None:
        x = sample_transition(model, xp, rng)
        log_w = model.emission.logpdf(x, y)
    else:
        eps = rng.standard_normal(xp.shape)
        x, log_r, _ = propose_reparam(proposal, model.dynamics.mean(xp), y, eps)
        log_t = transition_logpdf_and_grad(model, xp, x)[0]
        log_w = model.emission.logpdf(x, y) + log_t - log_r
    return finish_step(x, baseline + log_w, cloud.t + 1, None, resampled, 0.0, t0)


def log_marginal_accumulate(increments):
    """Running log p(y_{1:t}) estimate: the sum of per-step log mean weights."""
    return float(np.sum(np.asarray(increments, dtype=float))) if len(increments) else 0.0


def filtered_moments(cloud):
    """Self-normalized weighted mean and covariance of the particle cloud."""
    w, _ = normalize_weights(cloud.log_weights)
    mean = w @ cloud.states
    diff = cloud.states - mean
    cov = (w[:, None] * diff).T @ diff
    return mean, 0.5 * (cov + cov.T)
