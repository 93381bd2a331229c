"""Denoised randomized smoothing through a diffusion model.

A noisy copy ``x + delta`` with ``delta ~ N(0, sigma^2 I)`` is rescaled to the
latent ``sqrt(ab) (x + delta)`` at the timestep whose noise level matches
``sigma``, denoised, and classified.  Votes over many such copies give the
smoothed prediction and, through a one-sided binomial bound, an l2 radius
within which that prediction cannot change.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffusion as dif
from . import nn
from .numerics import ProbabilityBound, RngStream, binomial_lower_bound, std_normal_quantile

ABSTAIN = -1
SAMPLE_CHUNK = 500
CSV_COLUMNS = ("input_id", "true_label", "prediction", "pA_lower", "radius")


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 0.5
    n_samples: int = 10000
    confidence: float = 0.999
    abstain_allowed: bool = True
    n_select: int | None = None
    sampler: str = "one_step"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if self.sampler not in dif.SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")

    @classmethod
    def permissive_preset(cls) -> "SmoothingConfig":
        """Large N with a deliberately loose bound: N = 10000, sigma = 0.5,
        confidence 0.5."""
        return cls(sigma=0.5, n_samples=10000, confidence=0.5)

    @property
    def selection_size(self) -> int:
        return self.n_select if self.n_select is not None else max(1, self.n_samples // 10)


@dataclass(frozen=True)
class CertificationOutcome:
    predicted_class: int
    pA_bound: ProbabilityBound
    radius: float

    def __post_init__(self):
        if self.radius < 0 or (self.abstained and self.radius != 0.0):
            raise ValueError("radius must be >= 0 and exactly 0 when abstaining")

    @property
    def abstained(self) -> bool:
        return self.predicted_class == ABSTAIN


def sigma_to_timestep(sched: dif.VarianceSchedule, sigma: float) -> int:
    """Smallest ``t`` with ``(1 - ab_t) / ab_t >= sigma^2``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    ratio = (1.0 - sched.alpha_bar) / sched.alpha_bar
    hits = np.nonzero(ratio[1:] >= sigma * sigma)[0]
    if len(hits) == 0:
        raise ValueError(f"sigma={sigma} exceeds the schedule's reach "
                         f"(max {math.sqrt(ratio[-1]):.4g})")
    return int(hits[0]) + 1


def certified_radius(pA_lower: float, pB_upper: float, sigma: float) -> float:
    """``sigma / 2 * (Phi^-1(pA) - Phi^-1(pB))``, clamped at 0."""
    if pA_lower <= pB_upper:
        return 0.0
    return max(0.0, 0.5 * sigma * (std_normal_quantile(pA_lower) - std_normal_quantile(pB_upper)))


def _labels(classifier, x) -> np.ndarray:
    if isinstance(classifier, nn.Mlp):
        return nn.predict(classifier, x)
    return np.asarray(classifier(x))


def _num_classes(classifier, num_classes):
    if num_classes is not None:
        return int(num_classes)
    if isinstance(classifier, nn.Mlp):
        return classifier.out_dim
    raise ValueError("num_classes is required for a plain callable classifier")


def _noisy_votes(classifier, model, x, sigma, t, n, rng, sampler, n_classes):
    ab = model.schedule.alpha_bar[t]
    xn = np.sqrt(ab) * (x[None, :] + sigma * rng.normal((n, x.shape[0])))
    if sampler == "one_step":
        out = dif.one_step_denoise(model, xn, t)
    elif sampler == "ddim":
        out = dif.ddim_denoise(model, xn, t)
    else:
        out = dif.ddpm_denoise(model, xn, t, rng)
    if model.clip is not None:
        out = np.clip(out, *model.clip)
    return np.bincount(_labels(classifier, out), minlength=n_classes)[:n_classes]


def smoothed_predict(classifier, model: dif.DiffusionModel, x, cfg: SmoothingConfig, rng: RngStream,
                     n: int | None = None, num_classes: int | None = None, n_jobs: int = 1) -> np.ndarray:
    """Class-vote histogram over ``n`` (default ``cfg.n_samples``) noisy,
    denoised copies of ``x``.

    Samples are drawn in fixed chunks, each from its own labelled sub-stream,
    so counts are identical at any ``n_jobs``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("smoothed_predict takes a single input vector")
    n = cfg.n_samples if n is None else int(n)
    n_classes = _num_classes(classifier, num_classes)
    t = sigma_to_timestep(model.schedule, cfg.sigma)
    jobs = [(start, min(SAMPLE_CHUNK, n - start)) for start in range(0, n, SAMPLE_CHUNK)]

    def run(job):
        start, size = job
        return _noisy_votes(classifier, model, x, cfg.sigma, t, size,
                            rng.derive("chunk", start), cfg.sampler, n_classes)

    if n_jobs > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    return np.sum(parts, axis=0) if parts else np.zeros(n_classes, dtype=int)


def certify(classifier, model: dif.DiffusionModel, x, cfg: SmoothingConfig, rng: RngStream,
            num_classes: int | None = None, n_jobs: int = 1) -> CertificationOutcome:
    """Two-phase certification: a selection batch picks the top class, a
    fresh estimation batch bounds its probability from below."""
    select = smoothed_predict(classifier, model, x, cfg, rng.derive("select"), cfg.selection_size,
                              num_classes, n_jobs)
    top = int(np.argmax(select))
    counts = smoothed_predict(classifier, model, x, cfg, rng.derive("estimate"), cfg.n_samples,
                              num_classes, n_jobs)
    k = int(counts[top])
    p_lower = binomial_lower_bound(k, cfg.n_samples, cfg.confidence)
    point = k / cfg.n_samples
    bound = ProbabilityBound(point, min(p_lower, point), 1.0, cfg.confidence)
    if p_lower <= 0.5:
        if cfg.abstain_allowed:
            return CertificationOutcome(ABSTAIN, bound, 0.0)
        return CertificationOutcome(top, bound, 0.0)
    return CertificationOutcome(top, bound, certified_radius(p_lower, 1.0 - p_lower, cfg.sigma))


def certify_dataset(classifier, model: dif.DiffusionModel, inputs, cfg: SmoothingConfig,
                    rng: RngStream, num_classes: int | None = None, n_jobs: int = 1) -> list[CertificationOutcome]:
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    return [certify(classifier, model, row, cfg, rng.derive("input", i), num_classes, n_jobs)
            for i, row in enumerate(x)]


def accuracy_at(outcomes, labels, radius_eps: float) -> float:
    """Fraction certified, correct and with radius at least ``radius_eps``."""
    if radius_eps < 0:
        raise ValueError("radius_eps must be >= 0")
    labels = np.asarray(labels)
    if len(outcomes) != len(labels) or len(labels) == 0:
        raise ValueError("need one label per outcome")
    ok = [(not o.abstained) and o.predicted_class == y and o.radius >= radius_eps
          for o, y in zip(outcomes, labels)]
    return float(np.mean(ok))


def certified_accuracy(classifier, model: dif.DiffusionModel, dataset, cfg: SmoothingConfig,
                       radius_eps: float, rng: RngStream, num_classes: int | None = None,
                       n_jobs: int = 1) -> float:
    """``dataset`` is an ``(inputs, labels)`` pair."""
    if radius_eps < 0:
        raise ValueError("radius_eps must be >= 0")
    x, y = dataset
    outcomes = certify_dataset(classifier, model, x, cfg, rng, num_classes, n_jobs)
    return accuracy_at(outcomes, y, radius_eps)


def write_certification_csv(path, outcomes, labels, ids=None) -> None:
    ids = range(len(outcomes)) if ids is None else ids
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for i, o, y in zip(ids, outcomes, labels):
            pred = "abstain" if o.abstained else o.predicted_class
            w.writerow([i, int(y), pred, repr(o.pA_bound.lower), repr(o.radius)])
