"""Synthetic labelled data.

``gaussian_mixture``
    isotropic Gaussian blobs, one per class.
``image_like``
    a flattened pseudo-image.  A small block of pixels carries a 2-D mixture
    latent (each coordinate repeated ``repeat`` times); every other pixel
    holds a faint per-class sign code plus pixel noise.  The code is what
    makes a classifier trained on this data easy to fool with a small
    l-inf perturbation, and what a Gaussian-shrinking purifier washes out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..numerics import RngStream

KINDS = ("gaussian_mixture", "image_like")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "image_like"
    dim: int = 1024
    classes: int = 4
    centers: tuple | None = None
    spread: float = 0.1
    radius: float = math.sqrt(0.5)
    train_size: int = 4000
    test_size: int = 1000
    seed: int = 0
    repeat: int = 4
    code_amplitude: float = 0.015
    pixel_noise: float = 0.02
    clip: tuple[float, float] | None = (-1.0, 1.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.classes < 2 or self.dim < 1 or self.spread <= 0:
            raise ValueError("need >= 2 classes, dim >= 1 and a positive spread")
        if self.train_size < self.classes or self.test_size < self.classes:
            raise ValueError("train and test sizes must be at least the class count")
        if self.kind == "image_like" and self.dim < 2 * self.repeat + 1:
            raise ValueError("image_like needs room for the latent block plus code pixels")

    def class_centers(self) -> np.ndarray:
        """Centers in the mixture space (``dim`` wide for a plain mixture,
        2-D latent for ``image_like``)."""
        if self.centers is not None:
            c = np.asarray(self.centers, dtype=float)
            return c.reshape(self.classes, -1)
        width = self.dim if self.kind == "gaussian_mixture" else 2
        if width == 1:
            return np.linspace(-self.radius, self.radius, self.classes)[:, None]
        ang = math.pi / 4 + 2 * math.pi * np.arange(self.classes) / self.classes
        c = np.zeros((self.classes, width))
        c[:, 0], c[:, 1] = self.radius * np.cos(ang), self.radius * np.sin(ang)
        return c


@dataclass
class LabeledData:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    spec: DatasetSpec
    codes: np.ndarray | None = field(default=None, repr=False)

    @property
    def bounds(self) -> tuple[float, float]:
        return float(self.x_train.min()), float(self.x_train.max())


def _balanced_labels(n: int, classes: int, rng: RngStream) -> np.ndarray:
    return (np.arange(n) % classes)[rng.permutation(n)]


def make_dataset(spec: DatasetSpec) -> LabeledData:
    root = RngStream(spec.seed).derive("dataset", spec.kind)
    centers = spec.class_centers()
    codes = None
    if spec.kind == "image_like":
        codes = np.where(root.derive("codes").uniform((spec.classes, spec.dim)) < 0.5, -1.0, 1.0)
        codes[:, :2 * spec.repeat] = 0.0

    def draw(n, r):
        y = _balanced_labels(n, spec.classes, r.derive("labels"))
        latent = centers[y] + spec.spread * r.derive("latent").normal((n, centers.shape[1]))
        if spec.kind == "gaussian_mixture":
            return latent, y
        x = spec.code_amplitude * codes[y] + spec.pixel_noise * r.derive("pixels").normal((n, spec.dim))
        x[:, :2 * spec.repeat] += np.repeat(latent, spec.repeat, axis=1)
        if spec.clip is not None:
            x = np.clip(x, *spec.clip)
        return x, y

    x_tr, y_tr = draw(spec.train_size, root.derive("train"))
    x_te, y_te = draw(spec.test_size, root.derive("test"))
    return LabeledData(x_tr, y_tr, x_te, y_te, spec, codes)
