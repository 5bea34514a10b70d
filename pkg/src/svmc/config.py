"""Experiment configuration: a validated, JSON-serializable description of one run.

Unknown keys are rejected at every level so that typos fail loudly instead of
silently falling back to defaults.
"""

import inspect
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigError
from .filters import METHODS, build_runner, make_proposal
from .simulators import SIMULATORS
from .smc import SCHEMES
from .svmc import SvmcConfig

PROPOSAL_KEYS = {"family", "hidden", "scale", "residual", "prior_var"}
GP_KEYS = {"bounds", "counts", "lengthscale", "variance", "q", "sigma_z2", "max_inducing"}


@dataclass(frozen=True)
class ExperimentConfig:
    system: str = "lds"
    params: dict = field(default_factory=dict)
    method: str = "bpf"
    particles: int = 100
    grad_particles: int = 4
    sgd_steps: int = 15
    lr: float = 1e-3
    clip_norm: float = 10.0
    optimizer: str = "adam"
    scheme: str = "systematic"
    ess_threshold: float = None
    proposal: dict = field(default_factory=lambda: {"family": "mlp", "hidden": 32, "scale": 1.0, "residual": True})
    gp: dict = field(default_factory=dict)
    seed: int = 0
    data_seed: int = None
    replications: int = 1

    def __post_init__(self):
        if self.system not in SIMULATORS:
            raise ConfigError(f"unknown system {self.system!r}; choose from {sorted(SIMULATORS)}")
        allowed = set(inspect.signature(SIMULATORS[self.system]).parameters) - {"seed"}
        bad = set(self.params) - allowed
        if bad:
            raise ConfigError(f"unknown {self.system} parameters: {sorted(bad)}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {list(METHODS)}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown resampling scheme {self.scheme!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        for name in ("particles", "grad_particles", "replications"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not isinstance(self.sgd_steps, int) or self.sgd_steps < 0:
            raise ConfigError("sgd_steps must be a nonnegative integer")
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if set(self.proposal) - PROPOSAL_KEYS:
            raise ConfigError(f"unknown proposal keys: {sorted(set(self.proposal) - PROPOSAL_KEYS)}")
        if set(self.gp) - GP_KEYS:
            raise ConfigError(f"unknown gp keys: {sorted(set(self.gp) - GP_KEYS)}")
        if self.method == "svmc-gp" and not {"bounds", "counts"} <= set(self.gp):
            raise ConfigError("svmc-gp needs gp.bounds and gp.counts")

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        names = {f.name for f in fields(cls)}
        bad = set(d) - names
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None

    def override(self, **kw):
        """Return a copy with the non-None keyword values applied."""
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self

    def to_dict(self):
        return asdict(self)

    @property
    def dataset_seed(self):
        return self.seed if self.data_seed is None else self.data_seed

    def svmc_config(self):
        return SvmcConfig(
            n_particles=self.particles,
            n_grad=self.grad_particles,
            n_sgd=self.sgd_steps,
            lr=self.lr,
            clip_norm=self.clip_norm,
            optimizer=self.optimizer,
            scheme=self.scheme,
            ess_threshold=self.ess_threshold,
        )

    def runner(self, model, stream):
        """Filter runner for ``model`` whose randomness derives from ``stream``."""
        proposal = None
        if self.method in ("svmc", "svmc-gp") and self.proposal.get("family", "mlp") != "none":
            p = dict(self.proposal)
            proposal = make_proposal(p.pop("family", "mlp"), model, stream, **p)
        if self.method == "svmc" and proposal is None:
            raise ConfigError("method svmc needs a proposal family")
        return build_runner(self.method, model, stream, self.svmc_config(), proposal, self.gp)


# Desk-scale benchmark presets: a base config plus named method variants.
EXPERIMENTS = {
    "lds": {
        "base": {"system": "lds", "params": {"T": 50, "d": 10, "alpha": 0.42}},
        "variants": {
            "kalman": {"method": "kalman"},
            "bpf": {"method": "bpf", "particles": 20000},
            "svmc-affine": {"method": "svmc", "particles": 100, "proposal": {"family": "affine"}},
            "svmc-mlp": {
                "method": "svmc",
                "particles": 100,
                "sgd_steps": 100,
                "proposal": {"family": "mlp", "hidden": 32, "scale": 1.0, "residual": True},
            },
        },
    },
    "crnn": {
        "base": {"system": "crnn", "params": {"T": 200}},
        "variants": {
            "bpf": {"method": "bpf", "particles": 2000},
            "svmc-mlp": {
                "method": "svmc",
                "particles": 200,
                "lr": 3e-4,
                "proposal": {"family": "mlp", "hidden": 100, "scale": 0.15, "residual": True},
            },
        },
    },
    "nascar": {
        "base": {"system": "nascar", "params": {"T": 1500}},
        "variants": {
            "svmc-gp": {
                "method": "svmc-gp",
                "particles": 50,
                "proposal": {"family": "conjugate", "prior_var": 0.01},
                "gp": {"bounds": [[-5, 5], [-3, 3]], "counts": [8, 8], "lengthscale": 1.0, "variance": 0.1, "q": 1e-3, "sigma_z2": 1e-5},
            },
        },
    },
    "analog": {
        "base": {"system": "analog", "params": {"T": 3000}},
        "variants": {
            "svmc-gp": {
                "method": "svmc-gp",
                "particles": 50,
                "proposal": {"family": "conjugate", "prior_var": 1e-3},
                "gp": {"bounds": [[-1, 1], [-1, 1]], "counts": [8, 8], "lengthscale": 0.3, "variance": 0.01, "q": 1e-5, "sigma_z2": 1e-6},
            },
        },
    },
}


def experiment_configs(experiment, seed=0, replications=1, **overrides):
    """Name -> ExperimentConfig for every variant of a preset experiment."""
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {sorted(EXPERIMENTS)}")
    spec = EXPERIMENTS[experiment]
    out = {}
    for name, variant in spec["variants"].items():
        d = {**spec["base"], **variant, "seed": seed, "replications": replications}
        out[name] = ExperimentConfig.from_dict(d).override(**overrides)
    return out
