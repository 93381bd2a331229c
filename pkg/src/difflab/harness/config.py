"""Flat ``key = value`` experiment configuration.

One setting per line, dotted section prefixes (``diffusion.T = 100``), ``#``
starts a comment.  Every key must be one of :data:`DEFAULTS`; the value is
parsed to the type of its default.  Tuple-valued keys take comma-separated
lists.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    """Unparseable file, unknown key or out-of-range value."""


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    # which stages run_pipeline executes and whether the attack is included
    "run.chain": "full",
    "run.stages": ("purify-eval", "certify", "defend", "diagnose"),
    "run.n_jobs": 1,

    "data.kind": "image_like",
    "data.dim": 1024,
    "data.classes": 4,
    "data.train_size": 4000,
    "data.test_size": 1000,
    "data.spread": 0.1,
    "data.radius": math.sqrt(0.5),
    "data.repeat": 4,
    "data.code_amplitude": 0.015,
    "data.pixel_noise": 0.02,

    "diffusion.T": 100,
    "diffusion.beta_start": 1e-4,
    "diffusion.beta_end": 0.2,
    "diffusion.hidden": (128, 128),
    "diffusion.activation": "tanh",
    "diffusion.standardize": False,
    "diffusion.epochs": 40,
    "diffusion.lr": 1e-3,
    "diffusion.batch_size": 128,

    "purify.T_bar": 8,
    "purify.sampler": "ddpm",

    "classifier.hidden": (256, 256, 256),
    "classifier.surrogate_hidden": (128, 128),
    "classifier.epochs": 10,
    "classifier.lr": 1e-3,

    "attack.mode": "untargeted",
    "attack.target_class": 0,
    "attack.alpha": 0.05,
    "attack.trigger_size": 1.0,
    "attack.trigger_steps": 300,
    "attack.trigger_lr": 0.1,
    "attack.surrogates": 1,

    "backdoor.variant": "symmetric",
    "backdoor.lam": 1.0,
    "backdoor.truncation": 30,
    "backdoor.entangle_noise": True,
    "backdoor.epochs": 20,
    "backdoor.lr": 1e-3,

    "poison.enabled": False,
    "poison.rate": 0.01,
    "poison.epochs": 120,
    "poison.lr": 3e-3,

    "pgd.epsilon": 0.025,
    "pgd.step_size": 0.00625,
    "pgd.iterations": 10,

    "eval.inputs": 1000,

    "certify.sigma": 0.25,
    "certify.n_samples": 500,
    "certify.confidence": 0.999,
    "certify.inputs": 50,
    "certify.radii": (0.0, 0.1, 0.25, 0.5),
    "certify.sampler": "one_step",

    "defend.reproject_eps": (0.025, 0.05),
    "defend.entropy_t": 100,
    "defend.trials": 5,
    "defend.per_trial": 100,
    "defend.adv_epochs": 0,

    "diagnose.timesteps": (10, 30, 50),
    "diagnose.mc_dim": 3,
    "diagnose.mc_samples": 100000,

    "sweep.parameter": "alpha",
    "sweep.values": (0.01, 0.02, 0.05, 0.1),
}

# Keys that change how a run executes but not what it computes.
UNHASHED = frozenset({"run.n_jobs", "run.stages", "run.chain", "sweep.parameter", "sweep.values"})

CHOICES = {
    "run.chain": ("full", "benign"),
    "data.kind": ("gaussian_mixture", "image_like"),
    "diffusion.activation": ("tanh", "relu"),
    "purify.sampler": ("ddpm", "ddim", "one_step"),
    "certify.sampler": ("ddpm", "ddim", "one_step"),
    "attack.mode": ("untargeted", "targeted"),
    "backdoor.variant": ("symmetric", "nonadversarial"),
    "sweep.parameter": ("T_bar", "alpha", "trigger_size", "poison_rate"),
}

STAGE_NAMES = ("train-diffusion", "train-classifier", "make-trigger", "backdoor", "poison",
               "purify-eval", "certify", "defend", "diagnose")

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _parse_scalar(key: str, text: str, like: Any):
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def parse_value(key: str, text: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    like = DEFAULTS[key]
    text = text.strip()
    if isinstance(like, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        elem = like[0] if like else ""
        return tuple(_parse_scalar(key, p, elem) for p in parts)
    return _parse_scalar(key, text, like)


def _coerce(key: str, value):
    """Accept Python values (from overrides) as well as strings."""
    if isinstance(value, str):
        return parse_value(key, value)
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    like = DEFAULTS[key]
    if isinstance(like, tuple):
        items = value if isinstance(value, (list, tuple)) else [value]
        elem = like[0] if like else ""
        return tuple(_parse_scalar(key, str(v), elem) for v in items)
    return _parse_scalar(key, str(value), like)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Config(Mapping):
    """Immutable mapping of every known key to its value."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        merged = dict(DEFAULTS)
        for k, v in (values or {}).items():
            merged[k] = _coerce(k, v)
        self._values = merged
        self._validate()

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def __repr__(self):
        return f"Config({self.overrides()!r})"

    def __eq__(self, other):
        return isinstance(other, Config) and self._values == other._values

    def __hash__(self):
        return hash(self.digest())

    def with_overrides(self, **kw) -> "Config":
        """Override keys; use ``__`` for the dot (``attack__alpha=0.1``)."""
        return self.replace({k.replace("__", "."): v for k, v in kw.items()})

    def replace(self, updates: Mapping[str, Any]) -> "Config":
        merged = dict(self._values)
        merged.update(updates)
        return Config(merged)

    def overrides(self) -> dict[str, Any]:
        return {k: v for k, v in self._values.items() if v != DEFAULTS[k]}

    def section(self, *prefixes: str) -> dict[str, Any]:
        return {k: v for k, v in self._values.items()
                if k in prefixes or any(k.startswith(p + ".") for p in prefixes)}

    def as_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self._values.items()}

    def digest(self, *prefixes: str) -> str:
        """Hash of the hashed keys (all of them, or those under ``prefixes``)."""
        items = self.section(*prefixes) if prefixes else dict(self._values)
        payload = {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in sorted(items.items()) if k not in UNHASHED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def dumps(self) -> str:
        """Text that :func:`parse_config_text` reads back to an equal config."""
        return "".join(f"{k} = {_format(v)}\n" for k, v in self._values.items())

    def _validate(self):
        v = self._values
        for key, allowed in CHOICES.items():
            if v[key] not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {v[key]!r}")
        for key in v["run.stages"]:
            if key not in STAGE_NAMES:
                raise ConfigError(f"run.stages: unknown stage {key!r}")
        positive = ["data.dim", "data.classes", "data.train_size", "data.test_size", "data.repeat",
                    "diffusion.T", "diffusion.batch_size", "purify.T_bar", "attack.surrogates",
                    "backdoor.truncation", "pgd.iterations", "eval.inputs", "certify.n_samples",
                    "certify.inputs", "defend.entropy_t", "defend.trials", "defend.per_trial",
                    "run.n_jobs", "diagnose.mc_dim", "diagnose.mc_samples"]
        for key in positive:
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        for key in ["data.spread", "data.radius", "diffusion.lr", "classifier.lr", "backdoor.lr", "poison.lr",
                    "attack.trigger_lr", "certify.sigma", "pgd.step_size", "diffusion.beta_start",
                    "diffusion.beta_end", "attack.trigger_size"]:
            if not v[key] > 0:
                raise ConfigError(f"{key} must be positive")
        for key in ["diffusion.epochs", "classifier.epochs", "backdoor.epochs", "poison.epochs",
                    "attack.trigger_steps", "defend.adv_epochs", "pgd.epsilon", "backdoor.lam",
                    "data.code_amplitude", "data.pixel_noise"]:
            if v[key] < 0:
                raise ConfigError(f"{key} must be >= 0")
        if not 0.0 <= v["attack.alpha"] <= 1.0:
            raise ConfigError("attack.alpha must lie in [0, 1]")
        if v["attack.trigger_size"] > 1.0:
            raise ConfigError("attack.trigger_size is a fraction of the input width, at most 1")
        if not 0.0 < v["poison.rate"] < 1.0:
            raise ConfigError("poison.rate must lie in (0, 1)")
        if not 0.0 < v["certify.confidence"] < 1.0:
            raise ConfigError("certify.confidence must lie in (0, 1)")
        if not 0 <= v["attack.target_class"] < v["data.classes"]:
            raise ConfigError("attack.target_class must name a valid class")
        if not v["diffusion.beta_start"] < v["diffusion.beta_end"] < 1.0:
            raise ConfigError("need 0 < diffusion.beta_start < diffusion.beta_end < 1")
        for key in ("purify.T_bar", "backdoor.truncation", "defend.entropy_t"):
            if v[key] > v["diffusion.T"]:
                raise ConfigError(f"{key} exceeds diffusion.T")
        if any(t < 1 or t > v["diffusion.T"] for t in v["diagnose.timesteps"]) \
                or list(v["diagnose.timesteps"]) != sorted(set(v["diagnose.timesteps"])):
            raise ConfigError("diagnose.timesteps must be ascending and within 1..diffusion.T")
        if any(r < 0 for r in v["certify.radii"]) or any(e < 0 for e in v["defend.reproject_eps"]):
            raise ConfigError("radii and re-projection balls must be >= 0")
        if not v["diffusion.hidden"] or not v["classifier.hidden"] or not v["classifier.surrogate_hidden"]:
            raise ConfigError("hidden layer lists must be nonempty")
        if any(h < 1 for h in (*v["diffusion.hidden"], *v["classifier.hidden"],
                               *v["classifier.surrogate_hidden"])):
            raise ConfigError("hidden widths must be >= 1")


def parse_config_text(text: str, source: str = "<string>") -> Config:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = parse_value(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return Config(values)


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def as_config(source: "Config | Mapping | str | Path | None") -> Config:
    if source is None:
        return Config()
    if isinstance(source, Config):
        return source
    if isinstance(source, (str, Path)):
        return load_config(source)
    return Config(source)


def sweep_key(parameter: str) -> str:
    keys = {"T_bar": "purify.T_bar", "alpha": "attack.alpha",
            "trigger_size": "attack.trigger_size", "poison_rate": "poison.rate"}
    if parameter not in keys:
        raise ConfigError(f"unknown sweep parameter {parameter!r}; choose from {tuple(keys)}")
    return keys[parameter]

