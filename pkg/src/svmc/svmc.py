"""Streaming variational Monte Carlo: the filtering-ELBO objective and the per-step loop.

At each step the proposal (and any trainable model parameters) take a few
stochastic-gradient steps on the sum of L log-weights, with ancestors drawn
from the previous weights, and then one ordinary SMC step with the updated
proposal produces the new particle cloud.
"""

import time
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import DomainError
from .models import _as_batch
from .numerics import LOG_2PI, as_generator
from .proposals import backprop_proposal, propose_reparam
from .smc import normalize_weights, resample, smc_step


@dataclass(frozen=True)
class SvmcConfig:
    n_particles: int = 100
    n_grad: int = 4
    n_sgd: int = 15
    lr: float = 1e-3
    clip_norm: float = 10.0
    optimizer: str = "adam"
    scheme: str = "systematic"
    ess_threshold: float = None

    def __post_init__(self):
        if self.n_particles < 1 or self.n_grad < 1 or self.n_sgd < 0:
            raise DomainError("SvmcConfig: need n_particles >= 1, n_grad >= 1, n_sgd >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")


# --- optimizer --------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size, lr=1e-3, **kw):
        return cls(np.zeros(size), np.zeros(size), 0, lr, **kw)


def clip_by_global_norm(grads, max_norm):
    """Scale a list of arrays so their joint L2 norm is at most ``max_norm``."""
    if max_norm is None:
        return grads
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm <= max_norm or norm == 0.0:
        return grads
    return [g * (max_norm / norm) for g in grads]


def adam_step(params, grads, state, clip_norm=None):
    """Bias-corrected Adam *ascent* step.  Returns (new params, new state)."""
    (g,) = clip_by_global_norm([np.asarray(grads, dtype=float)], clip_norm)
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    new = params + state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, replace(state, m=m, v=v, step=step)


# --- objective --------------------------------------------------------------


def reparam_objective(proposal, feature, eps, y, emission, transition):
    """Sum of log-weights for reparameterized proposals and its gradients.

    ``transition(x)`` returns ``(logpdf, d/dx, d/dmean)`` of the transition
    density at the proposed states.  Returns
    ``(objective, log_w, g_proposal, g_feature, g_emission)`` where
    ``g_feature`` collects every route through the dynamics feature (proposal
    input and transition mean).
    """
    x, log_r, tape = propose_reparam(proposal, feature, y, eps)
    le, gx_e, g_psi = emission.logpdf_and_grad(x, y)
    lt, gx_t, g_mean_t = transition(x)
    log_w = le + lt - log_r
    g_lam, g_f = backprop_proposal(proposal, tape, gx_e + gx_t)
    return float(np.sum(log_w)), log_w, g_lam, g_f + g_mean_t, g_psi


def _gaussian_transition(f, Q):
    def transition(x):
        r = x - f
        alpha = Q.solve(r.T).T
        lp = -0.5 * np.sum(r * alpha, axis=1) - 0.5 * (f.shape[1] * LOG_2PI + Q.logdet())
        return lp, -alpha, alpha

    return transition


def elbo_objective_and_grad(model, prev_states, proposal, y, rng, L=None):
    """Filtering-ELBO estimate sum_{i<=L} log w_i and its reparameterized gradient.

    ``prev_states`` are already ancestor-resampled (no gradient flows through
    the ancestor draw).  Gradients are returned as a dict with keys
    ``proposal``, ``dynamics`` and ``emission``; model parameters outside
    their trainable masks get zero.
    """
    dyn = model.dynamics
    xp, _ = _as_batch(prev_states, dyn.dim, "prev_states")
    if L is not None and L != xp.shape[0]:
        raise DomainError("L must equal the number of ancestor states supplied")
    eps = as_generator(rng).standard_normal(xp.shape)
    f = dyn.mean(xp)
    obj, _, g_lam, g_f, g_psi = reparam_objective(
        proposal, f, eps, y, model.emission, _gaussian_transition(f, dyn.Q)
    )
    g_theta = np.where(dyn.trainable, dyn.mean_vjp(xp, g_f)[1], 0.0)
    return obj, {"proposal": g_lam, "dynamics": g_theta, "emission": g_psi}


# --- one SVMC step ----------------------------------------------------------


class StepResult(NamedTuple):
    cloud: object
    proposal: object
    model: object
    opt_state: dict
    diagnostics: object


def init_opt_state(proposal, model, config):
    state = {"proposal": AdamState.zeros(proposal.params.size, config.lr)}
    if model.dynamics is not None and model.dynamics.trainable.any():
        state["dynamics"] = AdamState.zeros(model.dynamics.params.size, config.lr)
    if model.emission.trainable.any():
        state["emission"] = AdamState.zeros(model.emission.params.size, config.lr)
    return state


def apply_gradients(proposal, model, grads, opt_state, config):
    """One optimizer step on every trainable block (gradient ascent)."""
    names = list(opt_state)
    clipped = dict(zip(names, clip_by_global_norm([grads[k] for k in names], config.clip_norm)))
    current = {"proposal": proposal.params}
    if "dynamics" in opt_state:
        current["dynamics"] = model.dynamics.params
    if "emission" in opt_state:
        current["emission"] = model.emission.params
    new_state = {}
    for k in names:
        if config.optimizer == "adam":
            current[k], new_state[k] = adam_step(current[k], clipped[k], opt_state[k])
        else:
            current[k] = current[k] + config.lr * clipped[k]
            new_state[k] = opt_state[k]
    proposal = proposal.with_params(current["proposal"])
    if "dynamics" in current:
        model = replace(model, dynamics=model.dynamics.with_params(current["dynamics"]))
    if "emission" in current:
        model = replace(model, emission=model.emission.with_params(current["emission"]))
    return proposal, model, new_state


def svmc_step(cloud, model, proposal, y, config, rng, sgd_rng=None, opt_state=None):
    """Optimize the proposal on the filtering ELBO, then filter with it.

    ``rng`` drives the final N-particle pass and ``sgd_rng`` the inner
    optimization (defaults to ``rng``, consumed first).  Passing separate
    generators makes the final pass identical to :func:`smc_step` with the
    same ``rng`` whenever the parameters do not move.
    """
    t0 = time.perf_counter()
    rng = as_generator(rng)
    sgd_rng = rng if sgd_rng is None else as_generator(sgd_rng)
    if opt_state is None:
        opt_state = init_opt_state(proposal, model, config)
    if config.n_sgd > 0:
        w, _ = normalize_weights(cloud.log_weights)
        for _ in range(config.n_sgd):
            ancestors = resample(w, "multinomial", sgd_rng, n=config.n_grad)
            _, grads = elbo_objective_and_grad(model, cloud.states[ancestors], proposal, y, sgd_rng)
            proposal, model, opt_state = apply_gradients(proposal, model, grads, opt_state, config)
    new_cloud, diag = smc_step(cloud, model, proposal, y, config.scheme, rng, config.ess_threshold)
    diag = replace(diag, wall_us=(time.perf_counter() - t0) * 1e6)
    new_cloud = replace(new_cloud, diagnostics=diag)
    return StepResult(new_cloud, proposal, model, opt_state, diag)
