"""State-space models: dynamics, emissions and the initial-state prior.

Every component keeps its trainable parameters as one flat vector with a
boolean mask of the same length.  Log densities are batched over the leading
axis; parameter gradients are summed over the batch and zeroed where the mask
is off.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError
from .numerics import LOG_2PI, PsdMat, cholesky, poisson_logpmf, student_t_logpdf


def _as_batch(x, d, name):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != d:
        raise DomainError(f"{name}: expected last dimension {d}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name}: non-finite input")
    return x, single


def _mask(trainable, size):
    if trainable is None or trainable is False:
        return np.zeros(size, dtype=bool)
    if trainable is True:
        return np.ones(size, dtype=bool)
    mask = np.asarray(trainable, dtype=bool).ravel()
    if mask.size != size:
        raise DomainError("trainable mask has the wrong length")
    return mask


def _psd(m):
    return m if isinstance(m, PsdMat) else cholesky(np.atleast_2d(np.asarray(m, dtype=float)))


# --- dynamics ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearDynamics:
    """x_t = A x_{t-1} + eps,  eps ~ N(0, Q)."""

    A: np.ndarray
    Q: PsdMat
    trainable: np.ndarray = None
    kind = "linear"

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Q", _psd(self.Q))
        object.__setattr__(self, "trainable", _mask(self.trainable, A.size))
        if A.shape[0] != A.shape[1] or self.Q.dim != A.shape[0]:
            raise DomainError("LinearDynamics: A must be square and match Q")

    @property
    def dim(self):
        return self.A.shape[0]

    @property
    def params(self):
        return self.A.ravel().copy()

    def with_params(self, p):
        return replace(self, A=np.asarray(p, dtype=float).reshape(self.A.shape))

    def mean(self, x):
        return x @ self.A.T

    def mean_vjp(self, x, g):
        """Pull back an upstream gradient on the mean to (x_prev, params)."""
        return g @ self.A, (g.T @ x).ravel()

    def to_dict(self):
        return {"kind": self.kind, "A": self.A.tolist(), "Q": self.Q.matrix.tolist()}


@dataclass(frozen=True, eq=False)
class VrnnDynamics:
    """Euler-discretized rate network: x + dt (-x + gamma W tanh x) / tau + eps."""

    W: np.ndarray
    gamma: float
    tau: float
    dt: float
    Q: PsdMat
    trainable: np.ndarray = None
    kind = "vrnn"

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "Q", _psd(self.Q))
        object.__setattr__(self, "trainable", _mask(self.trainable, W.size))
        if self.tau <= 0 or self.dt <= 0:
            raise DomainError("VrnnDynamics: tau and dt must be positive")

    @property
    def dim(self):
        return self.W.shape[0]

    @property
    def params(self):
        return self.W.ravel().copy()

    def with_params(self, p):
        return replace(self, W=np.asarray(p, dtype=float).reshape(self.W.shape))

    def mean(self, x):
        h = self.dt / self.tau
        return x * (1.0 - h) + (h * self.gamma) * (np.tanh(x) @ self.W.T)

    def mean_vjp(self, x, g):
        h = self.dt / self.tau
        th = np.tanh(x)
        gx = g * (1.0 - h) + (h * self.gamma) * (g @ self.W) * (1.0 - th * th)
        gw = (h * self.gamma) * (g.T @ th)
        return gx, gw.ravel()

    def to_dict(self):
        return {
            "kind": self.kind,
            "W": self.W.tolist(),
            "gamma": self.gamma,
            "tau": self.tau,
            "dt": self.dt,
            "Q": self.Q.matrix.tolist(),
        }


# --- emissions --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _LinearEmission:
    C: np.ndarray
    bias: np.ndarray = None
    trainable: np.ndarray = None

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        bias = np.zeros(C.shape[0]) if self.bias is None else np.asarray(self.bias, dtype=float).ravel()
        if bias.shape != (C.shape[0],):
            raise DomainError("emission offset must have length d_y")
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "bias", bias)
        object.__setattr__(self, "trainable", _mask(self.trainable, C.size + bias.size))

    @property
    def dim_x(self):
        return self.C.shape[1]

    @property
    def dim_y(self):
        return self.C.shape[0]

    @property
    def params(self):
        return np.concatenate([self.C.ravel(), self.bias])

    def with_params(self, p):
        p = np.asarray(p, dtype=float)
        nc = self.C.size
        return replace(self, C=p[:nc].reshape(self.C.shape), bias=p[nc:].copy())

    def predict(self, x):
        return x @ self.C.T + self.bias

    def _pullback(self, x, g_eta):
        # eta = C x + bias
        gx = g_eta @ self.C
        gpsi = np.concatenate([(g_eta.T @ x).ravel(), g_eta.sum(axis=0)])
        return gx, np.where(self.trainable, gpsi, 0.0)

    def logpdf_and_grad(self, x, y):
        """Return (logpdf per row, d/dx per row, d/dpsi summed over rows)."""
        x, single = _as_batch(x, self.dim_x, "emission")
        y = np.asarray(y, dtype=float)
        lp, g_eta = self._log_density(self.predict(x), y)
        gx, gpsi = self._pullback(x, g_eta)
        if single:
            return float(lp[0]), gx[0], gpsi
        return lp, gx, gpsi

    def logpdf(self, x, y):
        return self.logpdf_and_grad(x, y)[0]


@dataclass(frozen=True, eq=False)
class GaussianEmission(_LinearEmission):
    """y = C x + bias + xi,  xi ~ N(0, R)."""

    R: PsdMat = None
    kind = "gaussian"

    def __post_init__(self):
        super().__post_init__()
        if self.R is None:
            raise DomainError("GaussianEmission needs R")
        object.__setattr__(self, "R", _psd(self.R))
        if self.R.dim != self.dim_y:
            raise DomainError("GaussianEmission: R does not match C")

    def _log_density(self, eta, y):
        r = y - eta
        alpha = self.R.solve(r.T).T
        lp = -0.5 * np.sum(r * alpha, axis=1) - 0.5 * (self.dim_y * LOG_2PI + self.R.logdet())
        return lp, alpha

    def sample(self, x, rng):
        x, single = _as_batch(x, self.dim_x, "emission")
        z = rng.standard_normal(x.shape[:1] + (self.dim_y,))
        y = self.predict(x) + z @ self.R.factor.T
        return y[0] if single else y

    def to_dict(self):
        return {"kind": self.kind, "C": self.C.tolist(), "bias": self.bias.tolist(), "R": self.R.matrix.tolist()}


@dataclass(frozen=True, eq=False)
class StudentTEmission(_LinearEmission):
    """y = C x + D + xi,  xi_j iid Student-t(0, nu, sigma).  ``bias`` holds D."""

    nu: float = 2.0
    sigma: float = 1.0
    kind = "student_t"

    def __post_init__(self):
        super().__post_init__()
        if self.nu <= 0 or self.sigma <= 0:
            raise DomainError("StudentTEmission: nu and sigma must be positive")

    def _log_density(self, eta, y):
        lp, g = student_t_logpdf(y - eta, self.nu, self.sigma)
        return lp, -g["x"]

    def sample(self, x, rng):
        x, single = _as_batch(x, self.dim_x, "emission")
        noise = self.sigma * rng.standard_t(self.nu, size=x.shape[:1] + (self.dim_y,))
        y = self.predict(x) + noise
        return y[0] if single else y

    def to_dict(self):
        return {
            "kind": self.kind,
            "C": self.C.tolist(),
            "bias": self.bias.tolist(),
            "nu": self.nu,
            "sigma": self.sigma,
        }


@dataclass(frozen=True, eq=False)
class PoissonEmission(_LinearEmission):
    """y_j ~ Poisson(exp((C x + d)_j))."""

    kind = "poisson"

    def _log_density(self, eta, y):
        return poisson_logpmf(np.broadcast_to(y, eta.shape), eta)[0], y - np.exp(eta)

    def sample(self, x, rng):
        x, single = _as_batch(x, self.dim_x, "emission")
        y = rng.poisson(np.exp(self.predict(x))).astype(float)
        return y[0] if single else y

    def to_dict(self):
        return {"kind": self.kind, "C": self.C.tolist(), "bias": self.bias.tolist()}


# --- the full model ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    """Dynamics + emission + Gaussian prior on x_0 (standard normal by default).

    ``dynamics`` may be ``None`` when the transition is supplied externally
    (sparse-GP dynamics).
    """

    dynamics: object
    emission: object
    m0: np.ndarray = None
    P0: PsdMat = None

    def __post_init__(self):
        d = self.emission.dim_x
        if self.dynamics is not None and self.dynamics.dim != d:
            raise DomainError("dynamics and emission disagree on d_x")
        m0 = np.zeros(d) if self.m0 is None else np.asarray(self.m0, dtype=float).ravel()
        object.__setattr__(self, "m0", m0)
        object.__setattr__(self, "P0", _psd(np.eye(d) if self.P0 is None else self.P0))
        if m0.shape != (d,) or self.P0.dim != d:
            raise DomainError("initial prior has the wrong dimension")

    @property
    def dim_x(self):
        return self.emission.dim_x

    @property
    def dim_y(self):
        return self.emission.dim_y

    def sample_initial(self, n, rng):
        return self.m0 + rng.standard_normal((n, self.dim_x)) @ self.P0.factor.T

    def to_dict(self):
        return {
            "dynamics": None if self.dynamics is None else self.dynamics.to_dict(),
            "emission": self.emission.to_dict(),
            "m0": self.m0.tolist(),
            "P0": self.P0.matrix.tolist(),
        }


def transition_logpdf_and_grad(model, x_prev, x):
    """log N(x; f(x_prev), Q) with gradients (d/dx_prev, d/dx, d/dtheta).

    The parameter gradient is summed over the batch and masked by
    ``dynamics.trainable``.
    """
    dyn = model.dynamics
    xp, single = _as_batch(x_prev, dyn.dim, "transition x_prev")
    xx, _ = _as_batch(x, dyn.dim, "transition x")
    r = xx - dyn.mean(xp)
    alpha = dyn.Q.solve(r.T).T
    lp = -0.5 * np.sum(r * alpha, axis=1) - 0.5 * (dyn.dim * LOG_2PI + dyn.Q.logdet())
    g_xp, g_theta = dyn.mean_vjp(xp, alpha)
    g_theta = np.where(dyn.trainable, g_theta, 0.0)
    if single:
        return float(lp[0]), g_xp[0], -alpha[0], g_theta
    return lp, g_xp, -alpha, g_theta


def emission_logpdf_and_grad(model, x, y):
    """log p(y | x) with gradients (d/dx, d/dpsi)."""
    return model.emission.logpdf_and_grad(x, y)


def sample_transition(model, x_prev, rng):
    dyn = model.dynamics
    xp, single = _as_batch(x_prev, dyn.dim, "transition x_prev")
    x = dyn.mean(xp) + rng.standard_normal(xp.shape) @ dyn.Q.factor.T
    return x[0] if single else x


def sample_emission(model, x, rng):
    return model.emission.sample(x, rng)


# --- (de)serialization ------------------------------------------------------


def dynamics_from_dict(d, trainable=None):
    kind = d.get("kind")
    if kind == "linear":
        return LinearDynamics(np.asarray(d["A"]), np.asarray(d["Q"]), trainable)
    if kind == "vrnn":
        return VrnnDynamics(np.asarray(d["W"]), float(d["gamma"]), float(d["tau"]), float(d["dt"]), np.asarray(d["Q"]), trainable)
    raise DomainError(f"unknown dynamics kind {kind!r}")


def emission_from_dict(d, trainable=None):
    kind = d.get("kind")
    C = np.asarray(d["C"], dtype=float)
    bias = d.get("bias")
    if kind == "gaussian":
        return GaussianEmission(C, bias, trainable, R=np.asarray(d["R"]))
    if kind == "student_t":
        return StudentTEmission(C, bias, trainable, nu=float(d["nu"]), sigma=float(d["sigma"]))
    if kind == "poisson":
        return PoissonEmission(C, bias, trainable)
    raise DomainError(f"unknown emission kind {kind!r}")


def model_from_dict(d):
    dyn = None if d.get("dynamics") is None else dynamics_from_dict(d["dynamics"])
    P0 = d.get("P0")
    return StateSpaceModel(dyn, emission_from_dict(d["emission"]), d.get("m0"), None if P0 is None else np.asarray(P0))
