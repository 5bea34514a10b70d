"""Stateful filter runners: one ``step(y)`` per observation, one record per step.

All runners share the record layout used by the CLI (``t``, ``mean``,
``cov_diag``, ``ess``, ``log_ml_increment``, ``wall_us``).  Randomness for
step t comes from fixed substreams of the run seed, so a runner fed the same
observations produces the same records no matter how they arrive (batch file,
stdin stream, or a worker process).
"""

import time
from dataclasses import replace

import numpy as np

from .errors import DomainError
from .gp import GpBelief, init_inducing, svmc_gp_step
from .kalman import KalmanBelief, kalman_step, linear_gaussian_matrices
from .numerics import RngStream
from .models import GaussianEmission
from .proposals import AffineProposal, LinearProposal, MlpProposal, conjugate_linear_proposal
from .smc import ParticleCloud, filtered_moments, smc_step
from .svmc import SvmcConfig, init_opt_state, svmc_step

METHODS = ("kalman", "bpf", "svmc", "svmc-gp")

# substream ids under the run root
_INIT, _FILTER, _SGD, _PROPOSAL_INIT = range(4)


def run_stream(seed, replication=0):
    """Root random stream of one filtering run."""
    return RngStream(int(seed)).substream(int(replication))


def _root(seed):
    return seed if isinstance(seed, RngStream) else run_stream(seed)


def make_record(t, mean, cov, ess, log_ml_increment, wall_us):
    cov = np.atleast_2d(cov)
    return {
        "t": int(t),
        "mean": [float(v) for v in np.ravel(mean)],
        "cov_diag": [float(v) for v in np.diag(cov)],
        "ess": None if ess is None else float(ess),
        "log_ml_increment": float(log_ml_increment),
        "wall_us": float(wall_us),
    }


def make_proposal(family, model, seed, hidden=32, scale=1.0, residual=True, prior_var=None):
    """Fresh proposal for ``model``; any random init is drawn from the run root.

    ``"conjugate"`` is a linear proposal warm-started at the exact posterior
    for a linear-Gaussian emission and an isotropic N(f, prior_var I) prior.
    """
    d_x, d_y = model.dim_x, model.dim_y
    if family == "affine":
        return AffineProposal.init(d_x, scale)
    if family == "linear":
        return LinearProposal.init(d_x, d_y, scale)
    if family == "mlp":
        rng = _root(seed).substream(_PROPOSAL_INIT).generator()
        return MlpProposal.init(d_x, d_y, hidden, rng, scale=scale, residual=residual)
    if family == "conjugate":
        em = model.emission
        if not isinstance(em, GaussianEmission):
            raise DomainError("conjugate proposal needs a Gaussian emission")
        return conjugate_linear_proposal(em.C, em.R.matrix, scale**2 if prior_var is None else prior_var, em.bias)
    raise DomainError(f"unknown proposal family {family!r}")


class KalmanRunner:
    """Exact filtering for linear-Gaussian models."""

    def __init__(self, model):
        self.A, self.Q, self.C, self.R, m0, P0, self.bias = linear_gaussian_matrices(model)
        self.belief = KalmanBelief(m0, P0)
        self.t = 0

    def step(self, y):
        t0 = time.perf_counter()
        self.belief, ll = kalman_step(self.belief, self.A, self.Q, self.C, self.R, np.asarray(y, dtype=float), self.bias)
        self.t += 1
        return make_record(self.t, self.belief.mean, self.belief.cov, None, ll, (time.perf_counter() - t0) * 1e6)


class ParticleRunner:
    """Bootstrap filter (``proposal=None``) or SVMC with a trainable proposal."""

    def __init__(self, model, config, seed, proposal=None):
        self.model = model
        self.config = config
        self.root = _root(seed)
        self.proposal = proposal
        self.opt_state = None if proposal is None else init_opt_state(proposal, model, config)
        init_rng = self.root.substream(_INIT).generator()
        self.cloud = ParticleCloud(model.sample_initial(config.n_particles, init_rng), np.zeros(config.n_particles))

    def _rngs(self, t):
        return (
            self.root.substream(_FILTER).substream(t).generator(),
            self.root.substream(_SGD).substream(t).generator(),
        )

    def step(self, y):
        t = self.cloud.t + 1
        rng, sgd_rng = self._rngs(t)
        y = np.asarray(y, dtype=float)
        t0 = time.perf_counter()
        if self.proposal is None:
            self.cloud, diag = smc_step(self.cloud, self.model, None, y, self.config.scheme, rng, self.config.ess_threshold)
        else:
            res = svmc_step(self.cloud, self.model, self.proposal, y, self.config, rng, sgd_rng, self.opt_state)
            self.cloud, self.proposal, self.model, self.opt_state, diag = res
        mean, cov = filtered_moments(self.cloud)
        wall = (time.perf_counter() - t0) * 1e6
        return make_record(t, mean, cov, diag.ess, diag.log_ml_increment, wall)


class GpRunner(ParticleRunner):
    """SVMC with per-particle sparse-GP dynamics learned online."""

    def __init__(self, model, config, seed, grid, q, sigma_z2=0.0, proposal=None):
        self.model = model
        self.config = config
        self.root = _root(seed)
        self.proposal = proposal
        self.opt_state = None if proposal is None else init_opt_state(proposal, replace(model, dynamics=None), config)
        init_rng = self.root.substream(_INIT).generator()
        n = config.n_particles
        beliefs = GpBelief.prior(grid, model.dim_x, q, sigma_z2).repeat(n)
        self.cloud = ParticleCloud(model.sample_initial(n, init_rng), np.zeros(n), 0, beliefs)

    def step(self, y):
        t = self.cloud.t + 1
        rng, sgd_rng = self._rngs(t)
        t0 = time.perf_counter()
        res = svmc_gp_step(self.cloud, self.model, self.proposal, np.asarray(y, dtype=float), self.config, rng, sgd_rng, self.opt_state)
        self.cloud, self.proposal, self.model, self.opt_state, diag = res
        mean, cov = filtered_moments(self.cloud)
        wall = (time.perf_counter() - t0) * 1e6
        return make_record(t, mean, cov, diag.ess, diag.log_ml_increment, wall)


def build_runner(method, model, seed, config=None, proposal=None, gp=None):
    """Runner for ``method``; ``gp`` is a dict with grid bounds/counts, kernel, q, sigma_z2."""
    if method == "kalman":
        return KalmanRunner(model)
    config = config or SvmcConfig()
    if method == "bpf":
        return ParticleRunner(model, config, seed, None)
    if method == "svmc":
        if proposal is None:
            raise DomainError("svmc needs a proposal")
        return ParticleRunner(model, config, seed, proposal)
    if method == "svmc-gp":
        gp = gp or {}
        grid = init_inducing(
            gp["bounds"], gp["counts"], gp.get("lengthscale", 1.0), gp.get("variance", 1.0), gp.get("max_inducing", 400)
        )
        return GpRunner(model, config, seed, grid, gp.get("q", 1e-3), gp.get("sigma_z2", 0.0), proposal)
    raise DomainError(f"unknown method {method!r}")


def run_filter(runner, ys):
    return [runner.step(y) for y in np.atleast_2d(ys)]


def summarize(records, x_true=None):
    """Total -ELBO (minus the summed log-ML increments), RMSE vs true latents, wall time."""
    inc = np.array([r["log_ml_increment"] for r in records])
    out = {
        "neg_elbo": float(-inc.sum()) if len(records) else 0.0,
        "rmse": None,
        "wall_s": float(sum(r["wall_us"] for r in records)) * 1e-6,
        "steps": len(records),
    }
    if x_true is not None and len(records):
        means = np.array([r["mean"] for r in records])
        truth = np.asarray(x_true)[1 : len(records) + 1, : means.shape[1]]
        out["rmse"] = rmse(means, truth)
    return out


def rmse(a, b):
    """Root mean squared error over all entries."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DomainError(f"rmse: shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2))) if a.size else 0.0
