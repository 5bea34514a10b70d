"""Reparameterizable Gaussian proposals r(x_t | f_t, y_t; lambda).

A proposal maps a dynamics feature ``f`` (the transition mean, or the GP
predictive mean) and the current observation ``y`` to a diagonal Gaussian.
Samples are written as ``x = mean + scale * eps`` with ``eps ~ N(0, I)`` so
gradients flow through the sample path.  Standard deviations are floored at
``SCALE_FLOOR``; below the floor the log-scale gradient is zero.
"""

from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import DomainError
from .numerics import LOG_2PI

SCALE_FLOOR = 1e-4
LOG_SCALE_FLOOR = float(np.log(SCALE_FLOOR))


class Tape(NamedTuple):
    """Everything the backward pass needs from one batch of proposals."""

    cache: tuple
    eps: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    active: np.ndarray  # log-scale above the floor


def _check(params):
    if not np.all(np.isfinite(params)):
        raise DomainError("proposal parameters are not finite")


@dataclass(frozen=True, eq=False)
class AffineProposal:
    """N(mu + beta * f, diag(exp(2 s))): per-dimension shift, gain and log-scale."""

    mu: np.ndarray
    beta: np.ndarray
    log_scale: np.ndarray
    family = "affine"

    @classmethod
    def init(cls, d, scale=1.0):
        return cls(np.zeros(d), np.ones(d), np.full(d, np.log(scale)))

    @property
    def dim(self):
        return self.mu.size

    @property
    def params(self):
        return np.concatenate([self.mu, self.beta, self.log_scale])

    def with_params(self, p):
        d = self.dim
        return replace(self, mu=p[:d].copy(), beta=p[d : 2 * d].copy(), log_scale=p[2 * d :].copy())

    def forward(self, f, y):
        mean = self.mu + self.beta * f
        raw = np.broadcast_to(self.log_scale, f.shape)
        return mean, raw, (f,)

    def backward(self, cache, g_mean, g_raw):
        (f,) = cache
        g = np.concatenate([g_mean.sum(axis=0), (g_mean * f).sum(axis=0), g_raw.sum(axis=0)])
        return g, g_mean * self.beta

    def to_dict(self):
        return {"family": self.family, "mu": self.mu.tolist(), "beta": self.beta.tolist(), "log_scale": self.log_scale.tolist()}


@dataclass(frozen=True, eq=False)
class LinearProposal:
    """Mean and log-scale both affine in concat(f, y)."""

    Wm: np.ndarray
    bm: np.ndarray
    Ws: np.ndarray
    bs: np.ndarray
    family = "linear"

    @classmethod
    def init(cls, d_x, d_y, scale=1.0):
        """Start as the bootstrap-like map mean = f with a constant scale."""
        Wm = np.zeros((d_x, d_x + d_y))
        Wm[:, :d_x] = np.eye(d_x)
        return cls(Wm, np.zeros(d_x), np.zeros((d_x, d_x + d_y)), np.full(d_x, np.log(scale)))

    @property
    def dim(self):
        return self.bm.size

    @property
    def params(self):
        return np.concatenate([self.Wm.ravel(), self.bm, self.Ws.ravel(), self.bs])

    def with_params(self, p):
        sizes = np.cumsum([self.Wm.size, self.bm.size, self.Ws.size])
        Wm, bm, Ws, bs = np.split(p, sizes)
        return replace(self, Wm=Wm.reshape(self.Wm.shape), bm=bm.copy(), Ws=Ws.reshape(self.Ws.shape), bs=bs.copy())

    def forward(self, f, y):
        u = np.concatenate([f, np.broadcast_to(y, (f.shape[0], np.size(y)))], axis=1)
        return u @ self.Wm.T + self.bm, u @ self.Ws.T + self.bs, (u, f.shape[1])

    def backward(self, cache, g_mean, g_raw):
        u, df = cache
        g = np.concatenate([(g_mean.T @ u).ravel(), g_mean.sum(axis=0), (g_raw.T @ u).ravel(), g_raw.sum(axis=0)])
        g_u = g_mean @ self.Wm + g_raw @ self.Ws
        return g, g_u[:, :df]

    def to_dict(self):
        return {"family": self.family, **{k: getattr(self, k).tolist() for k in ("Wm", "bm", "Ws", "bs")}}


@dataclass(frozen=True, eq=False)
class MlpProposal:
    """One tanh hidden layer on concat(f, y) with a mean head and a log-scale head.

    With ``residual`` the mean head predicts a correction added to f.
    """

    W1: np.ndarray
    b1: np.ndarray
    Wm: np.ndarray
    bm: np.ndarray
    Ws: np.ndarray
    bs: np.ndarray
    residual: bool = False
    family = "mlp"

    @classmethod
    def init(cls, d_x, d_y, hidden, rng, scale=1.0, gain=1.0, residual=False):
        """Glorot-style random input layer and constant initial scale.

        The mean head is random, except with ``residual`` where it starts at
        zero so the initial proposal mean is exactly f.
        """
        d_in = d_x + d_y
        W1 = rng.standard_normal((hidden, d_in)) * np.sqrt(gain / d_in)
        Wm = rng.standard_normal((d_x, hidden)) * np.sqrt(gain / hidden)
        if residual:
            Wm = np.zeros_like(Wm)
        return cls(
            W1,
            np.zeros(hidden),
            Wm,
            np.zeros(d_x),
            np.zeros((d_x, hidden)),
            np.full(d_x, np.log(scale)),
            bool(residual),
        )

    @property
    def dim(self):
        return self.bm.size

    @property
    def hidden(self):
        return self.b1.size

    _names = ("W1", "b1", "Wm", "bm", "Ws", "bs")

    @property
    def params(self):
        return np.concatenate([getattr(self, k).ravel() for k in self._names])

    def with_params(self, p):
        shapes = [getattr(self, k).shape for k in self._names]
        sizes = np.cumsum([int(np.prod(s)) for s in shapes])[:-1]
        parts = np.split(np.asarray(p, dtype=float), sizes)
        return replace(self, **{k: v.reshape(s) for k, v, s in zip(self._names, parts, shapes)})

    def forward(self, f, y):
        u = np.concatenate([f, np.broadcast_to(y, (f.shape[0], np.size(y)))], axis=1)
        h = np.tanh(u @ self.W1.T + self.b1)
        mean = h @ self.Wm.T + self.bm
        if self.residual:
            mean = mean + f
        return mean, h @ self.Ws.T + self.bs, (u, h, f.shape[1])

    def backward(self, cache, g_mean, g_raw):
        u, h, df = cache
        g_h = g_mean @ self.Wm + g_raw @ self.Ws
        g_pre = g_h * (1.0 - h * h)
        g = np.concatenate(
            [
                (g_pre.T @ u).ravel(),
                g_pre.sum(axis=0),
                (g_mean.T @ h).ravel(),
                g_mean.sum(axis=0),
                (g_raw.T @ h).ravel(),
                g_raw.sum(axis=0),
            ]
        )
        g_f = (g_pre @ self.W1)[:, :df]
        if self.residual:
            g_f = g_f + g_mean
        return g, g_f

    def to_dict(self):
        return {"family": self.family, "residual": self.residual, **{k: getattr(self, k).tolist() for k in self._names}}


PROPOSAL_FAMILIES = {"affine": AffineProposal, "linear": LinearProposal, "mlp": MlpProposal}


def proposal_from_dict(d):
    d = dict(d)
    cls = PROPOSAL_FAMILIES[d.pop("family")]
    flags = {k: bool(d.pop(k)) for k in ("residual",) if k in d}
    return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()}, **flags)


def propose_reparam(proposal, f, y, eps):
    """Draw x = mean + scale * eps and its exact log proposal density.

    Parameters
    ----------
    proposal : AffineProposal | LinearProposal | MlpProposal
    f : ndarray (n, d_f)
        Dynamics feature for each particle.
    y : ndarray (d_y,)
    eps : ndarray (n, d_x)
        Standard-normal noise.

    Returns
    -------
    x : ndarray (n, d_x)
    log_r : ndarray (n,)
    tape : Tape
    """
    _check(proposal.params)
    f = np.atleast_2d(np.asarray(f, dtype=float))
    eps = np.atleast_2d(np.asarray(eps, dtype=float))
    mean, raw, cache = proposal.forward(f, np.asarray(y, dtype=float))
    active = raw > LOG_SCALE_FLOOR
    log_scale = np.where(active, raw, LOG_SCALE_FLOOR)
    scale = np.exp(log_scale)
    x = mean + scale * eps
    log_r = np.sum(-0.5 * eps * eps - log_scale - 0.5 * LOG_2PI, axis=1)
    return x, log_r, Tape(cache, eps, mean, scale, active)


def backprop_proposal(proposal, tape, g_x):
    """Gradient of sum_i [phi(x_i) - log r(x_i)] given g_x = d phi / d x.

    Both routes are included: through the sample path x(lambda) and through
    the explicit lambda-dependence of log r at fixed x.
    Returns (g_params, g_f).
    """
    eps, scale = tape.eps, tape.scale
    # total x-gradient of phi - log r, where d log r / dx = -(x - mean) / scale^2
    g_path = g_x + eps / scale
    # explicit: d log r / d mean = eps / scale,  d log r / d log_scale = eps^2 - 1
    g_mean = g_path - eps / scale
    g_log_scale = g_path * scale * eps - (eps * eps - 1.0)
    g_raw = np.where(tape.active, g_log_scale, 0.0)
    return proposal.backward(tape.cache, g_mean, g_raw)


def conjugate_linear_proposal(C, R, prior_var, bias=None):
    """LinearProposal equal to the exact posterior of x under N(f, prior_var I) and y ~ N(Cx + bias, R).

    Useful as a warm start when the emission is linear-Gaussian and known.
    The log-scale is the square root of the posterior covariance diagonal.
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    d_y, d_x = C.shape
    bias = np.zeros(d_y) if bias is None else np.asarray(bias, dtype=float)
    CtRi = np.linalg.solve(np.asarray(R, dtype=float), C).T
    P = np.linalg.inv(np.eye(d_x) / prior_var + CtRi @ C)
    Wm = np.hstack([P / prior_var, P @ CtRi])
    return LinearProposal(Wm, -P @ CtRi @ bias, np.zeros((d_x, d_x + d_y)), 0.5 * np.log(np.diag(P)))
