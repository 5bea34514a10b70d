"""Data generators for the benchmark systems.

Every generator is a pure function of its parameters and seed; the returned
metadata is enough to regenerate the data (and the true model) exactly.
Randomness is split into independent substreams per purpose so that, e.g.,
the random matrices of a system do not depend on T.
"""

import inspect
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import DomainError
from .models import GaussianEmission, LinearDynamics, StateSpaceModel, StudentTEmission, VrnnDynamics
from .numerics import RngStream

# substream ids
_PARAMS, _INIT, _PROCESS, _OBS, _SWITCH = range(5)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations y_1..y_T, optional true latents x_0..x_T, and generator metadata."""

    y: np.ndarray
    x: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        object.__setattr__(self, "y", y)
        if self.x is not None:
            x = np.atleast_2d(np.asarray(self.x, dtype=float))
            if x.shape[0] != y.shape[0] + 1:
                raise DomainError("Dataset: need T+1 latents for T observations")
            object.__setattr__(self, "x", x)

    @property
    def T(self):
        return self.y.shape[0]


def _gen(seed, purpose):
    return RngStream(int(seed)).substream(purpose).generator()


# --- linear dynamical system ------------------------------------------------


def lds_matrix(d, alpha):
    i = np.arange(d)
    return alpha ** (np.abs(i[:, None] - i[None, :]) + 1.0)


def lds_model(d=10, alpha=0.42, q=1.0, r=1.0, emission="identity", seed=0):
    """A_ij = alpha^(|i-j|+1), Q = q I, R = r I, x_0 ~ N(0, I).

    ``emission="identity"`` uses C = I; ``"gaussian"`` draws C_ij ~ N(0, 1)
    from the seed.
    """
    if emission == "identity":
        C = np.eye(d)
    elif emission == "gaussian":
        C = _gen(seed, _PARAMS).standard_normal((d, d))
    else:
        raise DomainError(f"unknown LDS emission {emission!r}")
    return StateSpaceModel(
        LinearDynamics(lds_matrix(d, alpha), q * np.eye(d)),
        GaussianEmission(C, R=r * np.eye(d)),
    )


def simulate_model(model, T, seed):
    """Ancestral sampling of any StateSpaceModel with parametric dynamics."""
    g_init, g_proc, g_obs = (_gen(seed, k) for k in (_INIT, _PROCESS, _OBS))
    d = model.dim_x
    x = np.zeros((T + 1, d))
    x[0] = model.m0 + model.P0.factor @ g_init.standard_normal(d)
    dyn = model.dynamics
    for t in range(1, T + 1):
        x[t] = dyn.mean(x[t - 1][None])[0] + dyn.Q.factor @ g_proc.standard_normal(d)
    y = np.asarray(model.emission.sample(x[1:], g_obs))
    return x, y


def simulate_lds(T=50, d=10, alpha=0.42, seed=0, q=1.0, r=1.0, emission="identity"):
    if not 0.0 < alpha < 1.0:
        raise DomainError("simulate_lds: alpha must lie in (0, 1)")
    params = {"T": int(T), "d": int(d), "alpha": float(alpha), "q": float(q), "r": float(r), "emission": emission}
    x, y = simulate_model(lds_model(d, alpha, q, r, emission, seed), T, seed)
    return Dataset(y, x, {"system": "lds", "params": params, "seed": int(seed)})


# --- chaotic rate network ---------------------------------------------------


def crnn_model(d=10, gamma=2.5, tau=0.025, dt=0.001, q=0.01, nu=2.0, sigma=0.1, seed=0):
    """W_ij, C_ij iid N(0, 1/d) from the seed; Student-t emission offset D = 0."""
    g = _gen(seed, _PARAMS)
    W = g.standard_normal((d, d)) / np.sqrt(d)
    C = g.standard_normal((d, d)) / np.sqrt(d)
    return StateSpaceModel(
        VrnnDynamics(W, gamma, tau, dt, q * np.eye(d)),
        StudentTEmission(C, np.zeros(d), nu=nu, sigma=sigma),
    )


def simulate_chaotic_rnn(T=500, d=10, gamma=2.5, tau=0.025, dt=0.001, nu=2.0, sigma=0.1, seed=0, q=0.01):
    params = {
        "T": int(T), "d": int(d), "gamma": float(gamma), "tau": float(tau), "dt": float(dt),
        "q": float(q), "nu": float(nu), "sigma": float(sigma),
    }
    model = crnn_model(d, gamma, tau, dt, q, nu, sigma, seed)
    x, y = simulate_model(model, T, seed)
    return Dataset(y, x, {"system": "crnn", "params": params, "seed": int(seed)})


# --- NASCAR recurrent switching LDS ----------------------------------------

NASCAR_R = np.array([[100.0, 0.0], [-100.0, 0.0], [0.0, 100.0]])
NASCAR_r = np.array([-200.0, -200.0, 0.0])


def _rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def nascar_regimes(theta1=-np.pi / 25, theta2=-np.pi / 25):
    """Per-regime (A_k, B_k) for the four discrete states."""
    A1, A2 = _rotation(theta1), _rotation(theta2)
    c1, c2 = np.array([2.0, 0.0]), np.array([-2.0, 0.0])
    I = np.eye(2)
    As = np.stack([A1, A2, I, I])
    Bs = np.stack([-(A1 - I) @ c1, -(A2 - I) @ c2, np.array([0.1, 0.0]), np.array([-0.35, 0.0])])
    return As, Bs


def stick_breaking_probs(x):
    """Regime probabilities (n, 4) from three logits R x + r by stick breaking."""
    x = np.atleast_2d(x)
    logits = x @ NASCAR_R.T + NASCAR_r
    sig = 0.5 * (1.0 + np.tanh(0.5 * logits))
    probs = np.empty((x.shape[0], 4))
    remain = np.ones(x.shape[0])
    for k in range(3):
        probs[:, k] = remain * sig[:, k]
        remain = remain * (1.0 - sig[:, k])
    probs[:, 3] = remain
    return probs


def nascar_drift(x, theta1=-np.pi / 25, theta2=-np.pi / 25):
    """Expected one-step displacement E[x_t - x_{t-1} | x_{t-1} = x] of the rSLDS."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    As, Bs = nascar_regimes(theta1, theta2)
    nxt = np.einsum("kij,nj->nki", As, x) + Bs[None]
    return np.einsum("nk,nki->ni", stick_breaking_probs(x), nxt) - x


def nascar_emission(d_y=50, r=0.01, seed=0):
    C = _gen(seed, _PARAMS).standard_normal((d_y, 2))
    return GaussianEmission(C, R=r * np.eye(d_y))


def simulate_nascar(T=2000, seed=0, q=0.001, r=0.01, d_y=50, theta1=-np.pi / 25, theta2=-np.pi / 25, x0=(0.0, 1.0)):
    """Recurrent switching LDS whose latent path traces an oval track.

    Top straight moves right by 0.1 per step, bottom straight left by 0.35,
    and the two ends are rotations about (+2, 0) and (-2, 0).
    """
    params = {
        "T": int(T), "q": float(q), "r": float(r), "d_y": int(d_y),
        "theta1": float(theta1), "theta2": float(theta2), "x0": [float(v) for v in x0],
    }
    As, Bs = nascar_regimes(theta1, theta2)
    g_proc, g_sw = _gen(seed, _PROCESS), _gen(seed, _SWITCH)
    x = np.zeros((T + 1, 2))
    z = np.zeros(T, dtype=np.int64)
    x[0] = x0
    sq = np.sqrt(q)
    for t in range(1, T + 1):
        p = stick_breaking_probs(x[t - 1])[0]
        k = min(int(np.searchsorted(np.cumsum(p), g_sw.random(), side="right")), 3)
        z[t - 1] = k
        x[t] = As[k] @ x[t - 1] + Bs[k] + sq * g_proc.standard_normal(2)
    em = nascar_emission(d_y, r, seed)
    y = em.sample(x[1:], _gen(seed, _OBS))
    return Dataset(y, x, {"system": "nascar", "params": params, "seed": int(seed), "regimes": z.tolist()})


# --- analog oscillator ------------------------------------------------------

ANALOG_COEF = 1.5 * np.cos(np.pi / 5)
# dimensionless time units per second; puts the limit cycle at about 2 Hz
ANALOG_TIME_SCALE = 18.1
# stable equilibria of the z-subsystem solve z = tanh(1.5 z)
ANALOG_Z_STAR = brentq(lambda z: z - np.tanh(1.5 * z), 0.5, 1.0, xtol=1e-15)


def analog_vector_field(state, a=ANALOG_COEF, b=ANALOG_COEF):
    x, y, z = state
    g = 5.0 * z - 5.0
    return np.array([
        g * (x - np.tanh(a * x - b * y)),
        g * (y - np.tanh(b * x + a * y)),
        -0.5 * (z - np.tanh(1.5 * z)),
    ])


def _rk4(f, s, h):
    k1 = f(s)
    k2 = f(s + 0.5 * h * k1)
    k3 = f(s + 0.5 * h * k2)
    k4 = f(s + h * k3)
    return s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def simulate_analog(T=3500, dt=1.0 / 200.0, seed=0, noise_var=1e-3, time_scale=ANALOG_TIME_SCALE, substeps=4, init=(0.5, 0.0, ANALOG_Z_STAR)):
    """RK4 integration of the three-variable oscillator, observed with Gaussian noise.

    All three coordinates are observed and ``x`` holds the full 3-D state.
    Starting z at its equilibrium keeps the x-y plane on a fixed limit cycle.
    """
    params = {
        "T": int(T), "dt": float(dt), "noise_var": float(noise_var),
        "time_scale": float(time_scale), "substeps": int(substeps), "init": [float(v) for v in init],
    }
    h = dt * time_scale / substeps
    s = np.asarray(init, dtype=float)
    x = np.zeros((T + 1, 3))
    x[0] = s
    for t in range(1, T + 1):
        for _ in range(substeps):
            s = _rk4(analog_vector_field, s, h)
        x[t] = s
    y = x[1:] + np.sqrt(noise_var) * _gen(seed, _OBS).standard_normal((T, 3))
    return Dataset(y, x, {"system": "analog", "params": params, "seed": int(seed)})


# --- registry ---------------------------------------------------------------

SIMULATORS = {
    "lds": simulate_lds,
    "crnn": simulate_chaotic_rnn,
    "nascar": simulate_nascar,
    "analog": simulate_analog,
}


def simulate(system, seed=0, **params):
    try:
        fn = SIMULATORS[system]
    except KeyError:
        raise DomainError(f"unknown system {system!r}") from None
    return fn(seed=seed, **params)


def default_metadata(system, params=None, seed=0):
    """Metadata a simulator would record for ``params`` (defaults filled in) without simulating."""
    try:
        fn = SIMULATORS[system]
    except KeyError:
        raise DomainError(f"unknown system {system!r}") from None
    sig = inspect.signature(fn)
    full = {k: v.default for k, v in sig.parameters.items() if k != "seed"}
    full.update(params or {})
    return {"system": system, "params": full, "seed": int(seed)}


def true_model(metadata):
    """The generating StateSpaceModel for a dataset (emission only for GP systems)."""
    metadata = default_metadata(metadata["system"], metadata["params"], metadata["seed"])
    system, p, seed = metadata["system"], metadata["params"], metadata["seed"]
    if system == "lds":
        return lds_model(p["d"], p["alpha"], p["q"], p["r"], p.get("emission", "identity"), seed)
    if system == "crnn":
        return crnn_model(p["d"], p["gamma"], p["tau"], p["dt"], p["q"], p["nu"], p["sigma"], seed)
    if system == "nascar":
        return StateSpaceModel(None, nascar_emission(p["d_y"], p["r"], seed))
    if system == "analog":
        # latent is the x-y plane; z sits at its equilibrium and enters as an offset
        C = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        bias = np.array([0.0, 0.0, p["init"][2]])
        return StateSpaceModel(None, GaussianEmission(C, bias, R=p["noise_var"] * np.eye(3)))
    raise DomainError(f"unknown system {system!r}")
