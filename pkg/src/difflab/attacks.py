"""Attack machinery: PGD, universal trigger search, backdoor fine-tuning of
the denoiser, data poisoning, and the asymmetric non-adversarial variant."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffusion as dif
from . import nn
from .numerics import RngStream

TRIGGER_FORMAT = "difflab-trigger/1"


@dataclass(frozen=True)
class AttackMode:
    kind: str = "untargeted"
    target_class: int | None = None

    def __post_init__(self):
        if self.kind not in ("untargeted", "targeted"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if (self.kind == "targeted") != (self.target_class is not None):
            raise ValueError("target_class must be given exactly when the attack is targeted")

    @property
    def targeted(self) -> bool:
        return self.kind == "targeted"

    @classmethod
    def targeted_at(cls, target: int = 0) -> "AttackMode":
        return cls("targeted", int(target))


@dataclass
class Trigger:
    """Universal pattern mixed in as ``(1 - alpha) * x + alpha * r``.

    ``support`` is a half-open index range; coordinates outside it are pinned
    to zero.
    """
    pattern: np.ndarray
    alpha: float = 0.05
    support: tuple[int, int] | None = None

    def __post_init__(self):
        self.pattern = np.array(self.pattern, dtype=float)
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"mixing weight must lie in [0, 1], got {self.alpha}")
        if not np.all(np.isfinite(self.pattern)):
            raise ValueError("trigger pattern must be finite")
        if self.support is not None:
            lo, hi = (int(v) for v in self.support)
            if not 0 <= lo < hi <= self.dim:
                raise ValueError(f"support {self.support} outside [0, {self.dim}]")
            self.support = (lo, hi)
            self.pattern *= self.mask

    @property
    def dim(self) -> int:
        return self.pattern.shape[0]

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.dim)
        lo, hi = self.support if self.support is not None else (0, self.dim)
        m[lo:hi] = 1.0
        return m

    @classmethod
    def random(cls, dim: int, rng: RngStream, alpha: float = 0.05, support=None,
               bounds: tuple[float, float] = (-1.0, 1.0)) -> "Trigger":
        lo, hi = bounds
        return cls(lo + (hi - lo) * rng.uniform(dim), alpha, support)

    def with_pattern(self, pattern) -> "Trigger":
        return Trigger(pattern, self.alpha, self.support)

    def save(self, path) -> None:
        doc = {"format": TRIGGER_FORMAT, "dim": self.dim, "alpha": self.alpha,
               "support": list(self.support) if self.support else None,
               # float.hex keeps the values bit-exact through JSON
               "pattern": [float(v).hex() for v in self.pattern]}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "Trigger":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != TRIGGER_FORMAT:
            raise ValueError(f"not a trigger file: {path}")
        pattern = np.array([float.fromhex(v) for v in doc["pattern"]])
        if pattern.shape[0] != doc["dim"]:
            raise ValueError("trigger file dimension mismatch")
        support = tuple(doc["support"]) if doc["support"] else None
        return cls(pattern, doc["alpha"], support)


def apply_trigger(x, trig: Trigger) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != trig.dim:
        raise ValueError(f"data width {x.shape[-1]} does not match trigger width {trig.dim}")
    if trig.alpha == 0.0:
        return x.copy()
    return (1.0 - trig.alpha) * x + trig.alpha * trig.pattern


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float
    step_size: float
    iterations: int = 10
    mode: AttackMode = field(default_factory=AttackMode)
    bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if self.epsilon < 0 or self.step_size < 0 or self.step_size > self.epsilon:
            raise ValueError("need 0 <= step_size <= epsilon")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def pgd_attack(classifier: nn.Mlp, x, label, cfg: PgdConfig, rng: RngStream | None = None,
               check: bool = False) -> np.ndarray:
    """l-inf PGD from the clean point (no random start, so ``rng`` is unused
    and kept for signature symmetry with other attacks)."""
    x0 = np.asarray(x, dtype=float)
    xa = x0.copy()
    if cfg.mode.targeted:
        labels = np.full(np.atleast_1d(label).shape, cfg.mode.target_class)
        direction = -1.0
    else:
        labels = np.asarray(label)
        direction = 1.0
    for _ in range(cfg.iterations):
        _, g = nn.value_and_grad(classifier, xa, lambda out: nn.cross_entropy_with_grad(out, labels))
        gin = g.input if x0.ndim == 2 else g.input[0]
        xa = np.clip(xa + direction * cfg.step_size * np.sign(gin), x0 - cfg.epsilon, x0 + cfg.epsilon)
        if cfg.bounds is not None:
            xa = np.clip(xa, *cfg.bounds)
        if check:
            assert np.max(np.abs(xa - x0)) <= cfg.epsilon + 1e-12
    return xa


def adversarial_train_classifier(model: nn.Mlp, x, y, cfg: PgdConfig, *, epochs: int,
                                 rng: RngStream, lr: float = 1e-3, batch_size: int = 128) -> nn.Mlp:
    """Madry-style training: every batch is replaced by its PGD counterpart."""
    def perturb(m, xb, yb, r):
        return pgd_attack(m, xb, yb, cfg)
    return nn.train_classifier(model, x, y, epochs=epochs, rng=rng, lr=lr,
                               batch_size=batch_size, perturb=perturb)


def optimize_trigger(surrogates: Sequence[nn.Mlp], dataset, mode: AttackMode, trig_init: Trigger,
                     steps: int, rng: RngStream, *, labels=None, lr: float = 0.1,
                     batch_size: int = 128, bounds: tuple[float, float] = (-1.0, 1.0),
                     optimizer: str = "adam") -> Trigger:
    """Search a universal pattern against one or more surrogate classifiers.

    Targeted: descent on ``sum_f CE(f(x_r), target)``.  Untargeted: ascent on
    the ground-truth loss (needs ``labels``).  ``optimizer`` is ``"adam"`` or
    plain ``"sgd"``.  The pattern is clamped to ``bounds`` and re-masked
    after every step.
    """
    if not surrogates:
        raise ValueError("at least one surrogate classifier is required")
    if optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    x = np.asarray(dataset, dtype=float)
    if not mode.targeted and labels is None:
        raise ValueError("untargeted trigger search needs ground-truth labels")
    y = None if labels is None else np.asarray(labels)
    if steps == 0:
        return trig_init
    r = trig_init.pattern.copy()
    mask = trig_init.mask
    m = np.zeros_like(r)
    v = np.zeros_like(r)
    b1, b2 = 0.9, 0.999
    sign = 1.0 if mode.targeted else -1.0
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(x), size=min(batch_size, len(x)))
        xb = x[idx]
        tb = np.full(len(xb), mode.target_class) if mode.targeted else y[idx]
        xr = (1.0 - trig_init.alpha) * xb + trig_init.alpha * r
        grad = np.zeros_like(r)
        for f in surrogates:
            _, g = nn.value_and_grad(f, xr, lambda out: nn.cross_entropy_with_grad(out, tb))
            grad += trig_init.alpha * g.input.sum(axis=0)
        grad *= sign * mask
        if optimizer == "sgd":
            r = np.clip(r - lr * grad, *bounds) * mask
            continue
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        r -= lr * (m / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + 1e-8)
        r = np.clip(r, *bounds) * mask
    return trig_init.with_pattern(r)


@dataclass(frozen=True)
class BackdoorConfig:
    lam: float = 1.0
    truncation: int = 30
    entangle_noise: bool = True
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.truncation < 1 or self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("invalid backdoor training configuration")


def _trigger_timesteps(brng: RngStream, n: int, cfg: BackdoorConfig, sched) -> np.ndarray:
    if cfg.truncation > sched.T:
        raise ValueError(f"truncation {cfg.truncation} exceeds schedule length {sched.T}")
    return brng.integers(1, cfg.truncation + 1, size=n)


def backdoor_train(model: dif.DiffusionModel, dataset, trig: Trigger, cfg: BackdoorConfig,
                   rng: RngStream, history: list | None = None) -> dif.DiffusionModel:
    """Fine-tune a benign denoiser so trigger inputs survive purification.

    Clean branch: the usual mean-alignment loss over the full horizon.
    Trigger branch: the same loss on ``x_r`` with ``t`` drawn from
    ``1..truncation``, weighted by ``lam``; with ``entangle_noise`` it reuses
    the clean branch's noise draw.
    """
    sched = model.schedule
    if cfg.truncation > sched.T:
        raise ValueError(f"truncation {cfg.truncation} exceeds schedule length {sched.T}")

    def branch(m, xb, t, eps, brng, idx):
        if cfg.lam == 0.0:
            return None
        xr = apply_trigger(xb, trig)
        tr = _trigger_timesteps(brng, len(xb), cfg, sched)
        eps_r = eps if cfg.entangle_noise else brng.normal(xb.shape)
        return dif.noise_regression(m, dif.forward_diffuse(xr, tr, eps_r, sched), tr, eps_r, cfg.lam)

    return dif.train_denoiser(model, dataset, cfg.epochs, rng, lr=cfg.lr, batch_size=cfg.batch_size,
                              extra_branch=branch, history=history)


def revised_noise(x_star_t, x_target, t, sched) -> np.ndarray:
    """Noise that makes ``x_star_t`` a forward sample of ``x_target`` at ``t``."""
    t = sched.check_t(t, low=1)
    ab = sched.alpha_bar[t]
    if np.ndim(ab) == 1:
        ab = ab[:, None]
    out = (x_star_t - np.sqrt(ab) * x_target) / np.sqrt(1.0 - ab)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("revised noise is not finite")
    return out


def backdoor_train_nonadversarial(model: dif.DiffusionModel, dataset, fixed_trigger: Trigger,
                                  surrogate: nn.Mlp, cfg: BackdoorConfig, rng: RngStream, *,
                                  labels=None, pgd: PgdConfig, adversary: Callable | None = None,
                                  history: list | None = None) -> dif.DiffusionModel:
    """Asymmetric variant: trigger inputs diffuse from ``x_r`` but the target
    noise is revised so the reverse process lands on a PGD example of ``x_r``.

    ``adversary(xr, labels)`` overrides the PGD step (tests use the identity).
    """
    sched = model.schedule
    x = np.asarray(dataset, dtype=float)
    y = None if labels is None else np.asarray(labels)
    if y is None and not pgd.mode.targeted:
        raise ValueError("untargeted PGD needs labels")

    def branch(m, xb, t, eps, brng, idx):
        if cfg.lam == 0.0:
            return None
        xr = apply_trigger(xb, fixed_trigger)
        if adversary is not None:
            x_adv = adversary(xr, None)
        else:
            yb = y[idx] if y is not None else np.zeros(len(xb), dtype=int)
            x_adv = pgd_attack(surrogate, xr, yb, pgd)
        tr = _trigger_timesteps(brng, len(xb), cfg, sched)
        eps_r = eps if cfg.entangle_noise else brng.normal(xb.shape)
        xr_t = dif.forward_diffuse(xr, tr, eps_r, sched)
        eps_star = revised_noise(xr_t, x_adv, tr, sched)
        return dif.noise_regression(m, xr_t, tr, eps_star, cfg.lam)

    return dif.train_denoiser(model, x, cfg.epochs, rng, lr=cfg.lr, batch_size=cfg.batch_size,
                              extra_branch=branch, history=history)


def poison_dataset(dataset, trig: Trigger, rate: float, rng: RngStream):
    """Copy of ``dataset`` with ``ceil(rate * n)`` random rows replaced by
    their trigger versions.  Returns ``(poisoned, poisoned_indices)``."""
    if not 0.0 < rate < 1.0:
        raise ValueError(f"poisoning rate must lie in (0, 1), got {rate}")
    x = np.array(dataset, dtype=float)
    k = math.ceil(rate * len(x) - 1e-9)
    idx = np.sort(rng.permutation(len(x))[:k])
    x[idx] = apply_trigger(x[idx], trig)
    return x, idx


def measure_asr(classifier, purifier: Callable | None, inputs, labels, mode: AttackMode) -> float:
    """Fraction of (purified) inputs sent to the target class, or
    misclassified when untargeted.  ``purifier=None`` means identity."""
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    if len(x) == 0:
        raise ValueError("empty batch")
    if purifier is not None:
        x = purifier(x)
    pred = classifier(x) if not isinstance(classifier, nn.Mlp) else nn.predict(classifier, x)
    pred = np.asarray(pred)
    if mode.targeted:
        return float(np.mean(pred == mode.target_class))
    return float(np.mean(pred != np.asarray(labels)))
