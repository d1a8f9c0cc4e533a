"""Synthetic cohorts from a shared-frailty Weibull proportional hazards model.

Hazard for subject j in location i::

    Z_i * h0(t) * exp(beta' x_j),   h0(t) = (k / lam) * (t / lam) ** (k - 1)

with ``Z_i ~ Gamma(shape=1/theta, scale=theta)`` (``Z_i = 1`` when theta is 0).
Censoring is ``min(Exponential(rate), admin_censor_days)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .cohort import BOOL_FIELDS, COVARIATES, Cohort
from .errors import ConfigError

__all__ = ["SimulationConfig", "simulate_cohort", "read_simulation_config", "parse_kv"]

DEFAULT_DISTRIBUTIONS = {
    "age": (40.0, 75.0),            # uniform integer range
    "sex": (0.45,),                 # P(male)
    "hdl": (52.0, 15.0),            # normal mean, sd; clipped to [20, 100]
    "total_cholesterol": (200.0, 35.0),  # clipped to [130, 320]
    "hypertension": (0.4,),
    "diabetes": (0.15,),
    "smoker": (0.15,),
    "antihypertensive": (0.3,),
    "ckd": (0.05,),
    "ra": (0.02,),
}
_CLIP = {"hdl": (20.0, 100.0), "total_cholesterol": (130.0, 320.0)}
_MAX_SEED = 2**64 - 1


@dataclass
class SimulationConfig:
    n_subjects: int = 10000
    n_locations: int = 10
    beta: dict = field(default_factory=dict)
    frailty_variance: float = 0.0
    weibull_shape: float = 1.0
    weibull_scale: float = 20000.0
    censoring_rate: float = 0.0
    admin_censor_days: float = 3652.0
    covariate_distributions: dict = field(default_factory=dict)
    seed: int = 0

    def validate(self) -> "SimulationConfig":
        if int(self.n_subjects) != self.n_subjects or self.n_subjects < 1:
            raise ConfigError("n_subjects must be a positive integer")
        if int(self.n_locations) != self.n_locations or self.n_locations < 1:
            raise ConfigError("n_locations must be a positive integer")
        if self.n_locations > self.n_subjects:
            raise ConfigError("n_locations must not exceed n_subjects")
        if self.n_locations > 900:
            raise ConfigError("at most 900 distinct zip3 locations are available")
        for name in self.beta:
            if name not in COVARIATES:
                raise ConfigError(f"beta names unknown covariate {name!r}")
        if not self.frailty_variance >= 0:
            raise ConfigError("frailty_variance must be >= 0")
        if not (self.weibull_shape > 0 and self.weibull_scale > 0):
            raise ConfigError("Weibull shape and scale must be positive")
        if not self.censoring_rate >= 0:
            raise ConfigError("censoring_rate must be >= 0")
        if not self.admin_censor_days > 0:
            raise ConfigError("admin_censor_days must be positive")
        if not (0 <= int(self.seed) <= _MAX_SEED):
            raise ConfigError("seed must be an unsigned 64-bit integer")
        for name, params in self.distributions().items():
            _check_distribution(name, params)
        return self

    def distributions(self) -> dict:
        out = dict(DEFAULT_DISTRIBUTIONS)
        for name, params in self.covariate_distributions.items():
            if name not in out:
                raise ConfigError(f"no distribution parameters for unknown covariate {name!r}")
            out[name] = tuple(float(p) for p in params)
        return out

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["beta"] = dict(sorted(self.beta.items()))
        d["covariate_distributions"] = {k: list(v) for k, v in sorted(self.distributions().items())}
        return d


def _check_distribution(name, params):
    if name == "age":
        if len(params) != 2 or not (params[0] <= params[1]):
            raise ConfigError("age distribution needs 'low,high' with low <= high")
    elif name in ("hdl", "total_cholesterol"):
        if len(params) != 2 or not params[1] >= 0:
            raise ConfigError(f"{name} distribution needs 'mean,sd' with sd >= 0")
    else:
        if len(params) != 1 or not (0.0 <= params[0] <= 1.0):
            raise ConfigError(f"{name} distribution needs a probability in [0, 1]")


def simulate_cohort(config: SimulationConfig) -> Cohort:
    """Draw a cohort; identical configs give identical cohorts."""
    config.validate()
    n, n_loc = int(config.n_subjects), int(config.n_locations)
    rng = np.random.default_rng(int(config.seed))
    dist = config.distributions()

    location = np.arange(n) % n_loc
    theta = float(config.frailty_variance)
    if theta > 0:
        frailty = rng.gamma(shape=1.0 / theta, scale=theta, size=n_loc)
    else:
        frailty = np.ones(n_loc)

    lo, hi = dist["age"]
    age = rng.integers(int(math.ceil(lo)), int(math.floor(hi)) + 1, size=n)
    male = rng.random(n) < dist["sex"][0]
    cont = {}
    for name in ("hdl", "total_cholesterol"):
        mean, sd = dist[name]
        cont[name] = np.clip(rng.normal(mean, sd, size=n), *_CLIP[name])
    flags = {name: rng.random(n) < dist[name][0] for name in BOOL_FIELDS}

    columns = {"age": age.astype(float), "sex": male.astype(float), **cont,
               **{k: v.astype(float) for k, v in flags.items()}}
    lp = np.zeros(n)
    for name, b in sorted(config.beta.items()):
        lp += float(b) * columns[name]

    # inverse-transform sampling of the Weibull PH event time
    e = rng.exponential(size=n)
    k, lam = float(config.weibull_shape), float(config.weibull_scale)
    event_time = lam * (e / (frailty[location] * np.exp(lp))) ** (1.0 / k)
    if config.censoring_rate > 0:
        censor = rng.exponential(1.0 / config.censoring_rate, size=n)
    else:
        censor = np.full(n, np.inf)
    censor = np.minimum(censor, float(config.admin_censor_days))
    event = event_time <= censor
    follow_up = np.where(event, event_time, censor)
    follow_up = np.maximum(follow_up, np.finfo(float).tiny)

    zip3 = _zip3_codes(n_loc)
    suffix = rng.integers(0, 100, size=n)
    zip5 = np.array([f"{zip3[l]}{s:02d}" for l, s in zip(location, suffix)], dtype=object)
    width = len(str(n))
    return Cohort(
        ids=np.array([f"S{i:0{width}d}" for i in range(n)], dtype=object),
        age=age, male=male, hdl=cont["hdl"], total_cholesterol=cont["total_cholesterol"],
        **flags, zip5=zip5, follow_up_days=follow_up, event=event,
        provenance=f"simulated(seed={int(config.seed)})",
    )


def _zip3_codes(n_loc):
    """Distinct three-digit prefixes spread over 100..999."""
    if n_loc == 1:
        return ["100"]
    return [f"{100 + (i * 899) // (n_loc - 1):03d}" for i in range(n_loc)]


# -------------------------------------------------------------- key=value files

def parse_kv(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _int(text):
    try:
        return int(text)
    except ValueError:
        f = float(text)
        if not f.is_integer():
            raise
        return int(f)


_SCALARS = {
    "n_subjects": _int, "n_locations": _int, "frailty_variance": float,
    "weibull_shape": float, "weibull_scale": float, "censoring_rate": float,
    "admin_censor_days": float, "seed": _int,
}


def simulation_config_from_mapping(values: dict, source: str = "<config>") -> SimulationConfig:
    """Build a config from flat string values (``beta.<name>``, ``dist.<name>`` keys)."""
    kwargs, beta, dists = {}, {}, {}
    for key, value in values.items():
        try:
            if key in _SCALARS:
                kwargs[key] = _SCALARS[key](value)
            elif key.startswith("beta."):
                beta[key[5:]] = float(value)
            elif key.startswith("dist."):
                dists[key[5:]] = tuple(float(v) for v in str(value).split(","))
            else:
                raise ConfigError(f"{source}: unknown key {key!r}")
        except ValueError:
            raise ConfigError(f"{source}: bad value for {key!r}: {value!r}") from None
    cfg = SimulationConfig(beta=beta, covariate_distributions=dists, **kwargs)
    return cfg.validate()


def read_simulation_config(path) -> SimulationConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return simulation_config_from_mapping(parse_kv(text, str(path)), str(path))
