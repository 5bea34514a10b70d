"""Online sparse-GP dynamics carried per particle.

Each particle owns a Gaussian belief N(mu, Gamma) over the GP values at a
fixed grid of pseudo-inputs.  Output dimensions are independent GPs that
share the kernel, the pseudo-inputs and Gamma (process noise is isotropic,
so the per-dimension update is identical); mu has one column per state
dimension.  The GP prior mean is the identity map, so the GP models the
displacement x_t - x_{t-1}.

Marginalizing the pseudo-outputs gives the transition used in the weights

    p(x_t | x_{0:t-1}) = N(v, s I),
    v = x_{t-1} + mu^T a,   s = c + a^T (Gamma + sigma_z2 I) a,
    a = K_zz^{-1} k_z(x_{t-1}),   c = k(x_{t-1}, x_{t-1}) - k_z^T a + q,

and after each accepted step the belief is inflated by the diffusion and
conditioned on the sampled transition with a rank-one update.
"""

import time
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import _kernels
from .errors import DomainError, GridTooLarge
from .numerics import LOG_2PI, PsdMat, as_generator, cholesky, se_gram
from .proposals import propose_reparam
from .smc import ParticleCloud, finish_step, normalize_weights, resample, select_ancestors
from .svmc import StepResult, apply_gradients, init_opt_state, reparam_objective

SNAPSHOT_SCHEMA = "svmc-gp-snapshot-v1"


@dataclass(frozen=True, eq=False)
class InducingGrid:
    """Pseudo-inputs on a regular grid plus the SE kernel and its K_zz factor."""

    points: np.ndarray
    lengthscale: float
    variance: float
    kzz: PsdMat
    bounds: tuple = None
    counts: tuple = None

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    def cross(self, x):
        return se_gram(x, self.points, self.lengthscale, self.variance)

    def to_dict(self):
        return {
            "bounds": [list(map(float, b)) for b in self.bounds],
            "counts": list(map(int, self.counts)),
            "lengthscale": self.lengthscale,
            "variance": self.variance,
        }


def init_inducing(bounds, counts, lengthscale=1.0, variance=1.0, max_inducing=400):
    """Regular Cartesian grid of pseudo-inputs over ``bounds`` (one (lo, hi) pair per dim)."""
    bounds = [tuple(map(float, b)) for b in bounds]
    counts = [int(c) for c in np.broadcast_to(counts, (len(bounds),))]
    if any(c < 1 for c in counts) or not all(np.isfinite(b).all() for b in bounds):
        raise DomainError("init_inducing: counts must be >= 1 and bounds finite")
    M = int(np.prod(counts))
    if M > max_inducing:
        raise GridTooLarge(f"{M} inducing points exceeds the cap of {max_inducing}")
    axes = [np.linspace(lo, hi, c) if c > 1 else np.array([0.5 * (lo + hi)]) for (lo, hi), c in zip(bounds, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    kzz = cholesky(se_gram(points, points, lengthscale, variance))
    return InducingGrid(points, float(lengthscale), float(variance), kzz, tuple(bounds), tuple(counts))


def grid_from_dict(d, max_inducing=400):
    return init_inducing(d["bounds"], d["counts"], d["lengthscale"], d["variance"], max_inducing)


@dataclass(frozen=True, eq=False)
class GpBelief:
    """Belief over pseudo-outputs for one particle (or a batch, leading axis N)."""

    grid: InducingGrid
    mu: np.ndarray
    gamma: np.ndarray
    q: float
    sigma_z2: float = 0.0

    @classmethod
    def prior(cls, grid, d, q, sigma_z2=0.0):
        return cls(grid, np.zeros((grid.size, d)), grid.kzz.matrix.copy(), float(q), float(sigma_z2))

    @property
    def batched(self):
        return self.gamma.ndim == 3

    def repeat(self, n):
        return replace(self, mu=np.repeat(self.mu[None], n, axis=0), gamma=np.repeat(self.gamma[None], n, axis=0))

    def take(self, idx):
        """Value copies of the selected particles' beliefs."""
        return replace(self, mu=self.mu[idx], gamma=self.gamma[idx])

    def particle(self, i):
        return replace(self, mu=self.mu[i].copy(), gamma=self.gamma[i].copy())


class Moments(NamedTuple):
    v: np.ndarray
    s: np.ndarray
    a: np.ndarray
    c: np.ndarray


def batch_moments(beliefs, x_prev, sigma_z2=None):
    """Marginal transition moments for N particles, each under its own belief."""
    grid = beliefs.grid
    xp = np.ascontiguousarray(np.atleast_2d(x_prev), dtype=float)
    kz = grid.cross(xp)
    a = np.ascontiguousarray(grid.kzz.solve(kz.T).T)
    c = np.maximum(grid.variance - np.sum(kz * a, axis=1), 0.0) + beliefs.q
    sz2 = beliefs.sigma_z2 if sigma_z2 is None else sigma_z2
    corr, quad = _kernels.gp_moments(a, np.ascontiguousarray(beliefs.gamma), np.ascontiguousarray(beliefs.mu), float(sz2))
    return Moments(xp + corr, c + quad, a, c)


def gp_transition_moments(belief, x_prev):
    """(v, s) with p(x_t | x_{0:t-1}) = N(v, s I) for a single belief and state."""
    b = belief if belief.batched else belief.repeat(1)
    m = batch_moments(b, np.atleast_2d(x_prev))
    if belief.batched:
        return m.v, m.s
    return m.v[0], float(m.s[0])


def batch_update(beliefs, moments, x_new):
    gamma, mu = _kernels.gp_update(
        moments.a,
        np.ascontiguousarray(beliefs.gamma),
        np.ascontiguousarray(beliefs.mu),
        moments.c,
        np.ascontiguousarray(np.atleast_2d(x_new) - moments.v),
        float(beliefs.sigma_z2),
    )
    return replace(beliefs, mu=mu, gamma=gamma)


def gp_belief_update(belief, x_prev, x_new):
    """Inflate Gamma by sigma_z2 I, then condition on the transition x_prev -> x_new."""
    b = belief if belief.batched else belief.repeat(1)
    m = batch_moments(b, np.atleast_2d(x_prev))
    out = batch_update(b, m, x_new)
    return out if belief.batched else out.particle(0)


# --- filtering step ---------------------------------------------------------


def _isotropic_transition(v, s):
    d = v.shape[1]

    def transition(x):
        r = x - v
        lp = -0.5 * np.sum(r * r, axis=1) / s - 0.5 * d * (LOG_2PI + np.log(s))
        g = r / s[:, None]
        return lp, -g, g

    return transition


def init_gp_cloud(model, grid, n, q, sigma_z2, rng):
    """Initial particles from the state prior, each with the GP prior belief."""
    rng = as_generator(rng)
    beliefs = GpBelief.prior(grid, model.dim_x, q, sigma_z2).repeat(n)
    return ParticleCloud(model.sample_initial(n, rng), np.zeros(n), 0, beliefs)


def svmc_gp_step(gp_cloud, model, proposal, y, config, rng, sgd_rng=None, opt_state=None):
    """One SVMC step with sparse-GP dynamics.

    ``model`` supplies the emission (its ``dynamics`` is ignored) and
    ``gp_cloud.aux`` holds the per-particle beliefs.  ``proposal=None`` draws
    from the marginal GP transition (bootstrap).  The proposal receives the GP
    predictive mean v as its dynamics feature.
    """
    t0 = time.perf_counter()
    rng = as_generator(rng)
    sgd_rng = rng if sgd_rng is None else as_generator(sgd_rng)
    beliefs = gp_cloud.aux
    emission = model.emission
    if proposal is not None and config.n_sgd > 0:
        if opt_state is None:
            opt_state = init_opt_state(proposal, replace(model, dynamics=None), config)
        w, _ = normalize_weights(gp_cloud.log_weights)
        for _ in range(config.n_sgd):
            anc = resample(w, "multinomial", sgd_rng, n=config.n_grad)
            mom = batch_moments(beliefs.take(anc), gp_cloud.states[anc])
            eps = sgd_rng.standard_normal(mom.v.shape)
            _, _, g_lam, _, g_psi = reparam_objective(
                proposal, mom.v, eps, y, emission, _isotropic_transition(mom.v, mom.s)
            )
            proposal, model, opt_state = apply_gradients(
                proposal, model, {"proposal": g_lam, "emission": g_psi}, opt_state, config
            )
            emission = model.emission

    anc, baseline, resampled = select_ancestors(gp_cloud, config.scheme, rng, config.ess_threshold)
    b = beliefs.take(anc)
    mom = batch_moments(b, gp_cloud.states[anc])
    eps = rng.standard_normal(mom.v.shape)
    if proposal is None:
        x = mom.v + np.sqrt(mom.s)[:, None] * eps
        log_w = emission.logpdf(x, y)
    else:
        x, log_r, _ = propose_reparam(proposal, mom.v, y, eps)
        log_w = emission.logpdf(x, y) + _isotropic_transition(mom.v, mom.s)(x)[0] - log_r
    new_beliefs = batch_update(b, mom, x)
    cloud, diag = finish_step(x, baseline + log_w, gp_cloud.t + 1, new_beliefs, resampled, beliefs.grid.kzz.jitter, t0)
    return StepResult(cloud, proposal, model, opt_state, diag)


# --- prediction -------------------------------------------------------------


def predictive_mixture(gp_cloud, x_star):
    """Weighted mixture of per-particle sparse-GP predictives at one test point.

    Returns (mean (d,), covariance (d, d)).
    """
    w, _ = normalize_weights(gp_cloud.log_weights)
    beliefs = gp_cloud.aux
    x_star = np.atleast_1d(np.asarray(x_star, dtype=float))
    n, d = gp_cloud.n, x_star.size
    m = batch_moments(beliefs, np.repeat(x_star[None], n, axis=0), sigma_z2=0.0)
    mean = w @ m.v
    cov = np.zeros((d, d))
    for wi, vi, si in zip(w, m.v, m.s):
        cov += wi * (si * np.eye(d) + np.outer(vi, vi) - np.outer(vi, mean) - np.outer(mean, vi) + np.outer(mean, mean))
    return mean, 0.5 * (cov + cov.T)


def mixture_mean_field(gp_cloud, xs):
    """Mixture predictive mean at many test points (rows of ``xs``)."""
    w, _ = normalize_weights(gp_cloud.log_weights)
    beliefs = gp_cloud.aux
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    kz = beliefs.grid.cross(xs)
    a = beliefs.grid.kzz.solve(kz.T).T
    mu_bar = np.einsum("n,nmd->md", w, beliefs.mu)
    return xs + a @ mu_bar


class Rollout(NamedTuple):
    trajectories: np.ndarray  # (N, K+1, d), index 0 is the current state
    means: np.ndarray  # (K+1, d)
    covs: np.ndarray  # (K+1, d, d)


def rollout(gp_cloud, horizon, rng):
    """Simulate every particle forward ``horizon`` steps under its frozen belief."""
    rng = as_generator(rng)
    w, _ = normalize_weights(gp_cloud.log_weights)
    beliefs = gp_cloud.aux
    x = gp_cloud.states.copy()
    traj = [x]
    for _ in range(int(horizon)):
        m = batch_moments(beliefs, x, sigma_z2=0.0)
        x = m.v + np.sqrt(m.s)[:, None] * rng.standard_normal(x.shape)
        traj.append(x)
    traj = np.stack(traj, axis=1)
    means = np.einsum("n,nkd->kd", w, traj)
    diff = traj - means[None]
    covs = np.einsum("n,nkd,nke->kde", w, diff, diff)
    return Rollout(traj, means, covs)


# --- snapshots --------------------------------------------------------------


def snapshot(gp_cloud):
    """JSON-ready dict of the cloud's beliefs, weights and hyperparameters."""
    b = gp_cloud.aux
    return {
        "schema": SNAPSHOT_SCHEMA,
        "t": int(gp_cloud.t),
        "grid": b.grid.to_dict(),
        "q": b.q,
        "sigma_z2": b.sigma_z2,
        "states": gp_cloud.states.tolist(),
        "log_weights": gp_cloud.log_weights.tolist(),
        "mu": b.mu.tolist(),
        "gamma": b.gamma.tolist(),
    }


def cloud_from_snapshot(d, max_inducing=400):
    if d.get("schema") != SNAPSHOT_SCHEMA:
        raise DomainError(f"not a GP snapshot (schema {d.get('schema')!r})")
    grid = grid_from_dict(d["grid"], max_inducing)
    beliefs = GpBelief(grid, np.asarray(d["mu"], dtype=float), np.asarray(d["gamma"], dtype=float), float(d["q"]), float(d["sigma_z2"]))
    return ParticleCloud(np.asarray(d["states"], dtype=float), np.asarray(d["log_weights"], dtype=float), int(d["t"]), beliefs)


def lattice(bounds, counts):
    axes = [np.linspace(lo, hi, int(c)) for (lo, hi), c in zip(bounds, counts)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def export_velocity_field(snap, bounds, counts):
    """Rows of (x, v(x) - x) on a regular lattice, from a snapshot dict or GP cloud."""
    cloud = cloud_from_snapshot(snap) if isinstance(snap, dict) else snap
    xs = lattice(bounds, counts)
    return np.hstack([xs, mixture_mean_field(cloud, xs) - xs])
