"""Countermeasures and diagnostics against diffusion backdoors.

* :func:`reproject` clamps a purified output back into an l-inf ball around
  the purifier's input.
* :func:`entropy_detect` generates from heavily diffused clean inputs and
  scores how concentrated the classifier's verdicts are.  A model biased
  towards one class yields low entropy.
* :func:`kl_monotonicity_check` gives the closed-form KL between two
  forward-diffused unit-variance Gaussians; it shrinks with ``t``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffusion as dif
from . import nn
from .numerics import RngStream, entropy


def reproject(x_input, x_purified, eps_ball: float) -> np.ndarray:
    x_input = np.asarray(x_input, dtype=float)
    x_purified = np.asarray(x_purified, dtype=float)
    if x_input.shape != x_purified.shape:
        raise ValueError(f"shape mismatch {x_input.shape} vs {x_purified.shape}")
    if eps_ball < 0:
        raise ValueError("eps_ball must be >= 0")
    out = np.array(np.clip(x_purified, x_input - eps_ball, x_input + eps_ball))
    # x + eps can round outward; step such coordinates back toward x so the
    # distance computed in floating point never exceeds eps
    for _ in range(8):
        bad = np.abs(out - x_input) > eps_ball
        if not bad.any():
            return out
        out[bad] = np.nextafter(out[bad], x_input[bad])
    return np.where(np.abs(out - x_input) > eps_ball, x_input, out)


def reprojecting_purifier(model: dif.DiffusionModel, T_bar: int, eps_ball: float, rng: RngStream,
                          sampler: str = "ddpm"):
    """Purifier callable whose outputs stay within ``eps_ball`` of its inputs."""
    def purifier(x):
        return reproject(x, dif.purify(model, x, T_bar, rng, sampler), eps_ball)
    return purifier


@dataclass(frozen=True)
class EntropyReport:
    entropies: list[float]
    mean: float
    trial_size: int
    timestep: int
    num_classes: int

    def __post_init__(self):
        cap = np.log(self.num_classes) + 1e-12
        if any(not 0.0 <= e <= cap for e in self.entropies):
            raise ValueError("entropy outside [0, ln C]")
        if self.entropies and abs(self.mean - float(np.mean(self.entropies))) > 1e-12:
            raise ValueError("mean inconsistent with the per-trial entropies")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EntropyReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def entropy_detect(model: dif.DiffusionModel, classifier, reference_inputs, t_large: int, trials: int,
                   per_trial: int, rng: RngStream, sampler: str = "ddpm",
                   num_classes: int | None = None) -> EntropyReport:
    """Per trial: draw ``per_trial`` clean references, purify them at
    ``t_large``, classify, and take the entropy of the predicted-class
    histogram."""
    x = np.atleast_2d(np.asarray(reference_inputs, dtype=float))
    if x.size == 0 or len(x) == 0:
        raise ValueError("empty reference set")
    if trials < 1 or per_trial < 1:
        raise ValueError("trials and per_trial must be >= 1")
    if num_classes is None:
        if not isinstance(classifier, nn.Mlp):
            raise ValueError("num_classes is required for a plain callable classifier")
        num_classes = classifier.out_dim
    t_large = int(model.schedule.check_t(t_large, low=1))
    values = []
    for i in range(trials):
        trng = rng.derive("trial", i)
        idx = trng.permutation(len(x))[:per_trial] if per_trial <= len(x) \
            else trng.integers(0, len(x), per_trial)
        out = dif.purify(model, x[idx], t_large, trng.derive("purify"), sampler)
        pred = nn.predict(classifier, out) if isinstance(classifier, nn.Mlp) else np.asarray(classifier(out))
        hist = np.bincount(pred, minlength=num_classes)[:num_classes]
        values.append(entropy(hist / hist.sum()))
    return EntropyReport(values, float(np.mean(values)), int(per_trial), t_large, int(num_classes))


def kl_monotonicity_check(mean_shift, sched: dif.VarianceSchedule, timesteps) -> list[float]:
    """``KL(N(sqrt(ab) m, I) || N(sqrt(ab)(m + shift), I)) = ab |shift|^2 / 2``
    at each requested timestep."""
    ts = np.asarray(list(timesteps))
    if ts.size == 0 or np.any(np.diff(ts) <= 0):
        raise ValueError("timesteps must be a nonempty ascending list")
    sched.check_t(ts)
    sq = float(np.sum(np.asarray(mean_shift, dtype=float) ** 2))
    return [float(sched.alpha_bar[t] * sq / 2.0) for t in ts]


def gaussian_fit_kl(samples_p, samples_q) -> float:
    """KL between full-covariance Gaussians fitted to two samples."""
    p = np.atleast_2d(np.asarray(samples_p, dtype=float))
    q = np.atleast_2d(np.asarray(samples_q, dtype=float))
    mp, mq = p.mean(axis=0), q.mean(axis=0)
    cp = np.atleast_2d(np.cov(p, rowvar=False))
    cq = np.atleast_2d(np.cov(q, rowvar=False))
    d = len(mp)
    cq_inv = np.linalg.inv(cq)
    diff = mq - mp
    _, logdet_p = np.linalg.slogdet(cp)
    _, logdet_q = np.linalg.slogdet(cq)
    return float(0.5 * (np.trace(cq_inv @ cp) + diff @ cq_inv @ diff - d + logdet_q - logdet_p))


def kl_monte_carlo(source_p, source_q, sched: dif.VarianceSchedule, timesteps, rng: RngStream) -> list[float]:
    """Empirical counterpart of :func:`kl_monotonicity_check`: forward-diffuse
    two clean samples with fresh noise and compare Gaussian fits."""
    out = []
    p = np.atleast_2d(np.asarray(source_p, dtype=float))
    q = np.atleast_2d(np.asarray(source_q, dtype=float))
    for t in timesteps:
        r = rng.derive("t", int(t))
        pt = dif.forward_diffuse(p, int(t), r.derive("p").normal(p.shape), sched)
        qt = dif.forward_diffuse(q, int(t), r.derive("q").normal(q.shape), sched)
        out.append(gaussian_fit_kl(pt, qt))
    return out
