"""Random streams, normal-distribution helpers and small statistics.

Every stochastic routine in the package draws from an :class:`RngStream`.
Streams are backed by the counter-based Philox generator and keyed by a
``(seed, stream_id)`` pair, so any sub-stream can be re-derived from its label
without replaying its parent.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

_MASK64 = (1 << 64) - 1


def _mix64(*parts: int | str) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


@dataclass
class RngStream:
    seed: int
    stream_id: int = 0
    _gen: np.random.Generator | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.stream_id = int(self.stream_id) & _MASK64

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            key = (self.stream_id << 64) | self.seed
            self._gen = np.random.Generator(np.random.Philox(key=key))
        return self._gen

    def derive(self, *labels: int | str) -> "RngStream":
        """Child stream named by ``labels``; independent of how far this one has advanced."""
        return RngStream(self.seed, _mix64(self.stream_id, *labels))

    def split(self, count: int) -> list["RngStream"]:
        """``count`` child streams keyed by one fresh draw from this stream."""
        key = int(self.generator.integers(0, 1 << 63))
        return [RngStream(self.seed, _mix64(self.stream_id, key, i)) for i in range(count)]

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, shape=None) -> np.ndarray:
        return self.generator.random(shape)

    def integers(self, low, high, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def as_stream(rng: RngStream | int) -> RngStream:
    return rng if isinstance(rng, RngStream) else RngStream(int(rng))


def gaussian_sample(rng: RngStream, dim: int) -> np.ndarray:
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    return rng.normal(dim)


@dataclass(frozen=True)
class ProbabilityBound:
    point_estimate: float
    lower: float
    upper: float
    confidence: float

    def __post_init__(self):
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie in (0, 1)")
        if not 0.0 <= self.lower <= self.point_estimate <= self.upper <= 1.0:
            raise ValueError(
                f"bound ordering violated: {self.lower} <= {self.point_estimate} <= {self.upper}")


def std_normal_cdf(z):
    z = np.asarray(z, dtype=float)
    out = 0.5 * special.erfc(-z / math.sqrt(2.0))
    return float(out) if out.ndim == 0 else out


# Acklam's rational approximation, refined below by a Newton step on the CDF.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        return -_acklam(1.0 - p)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def std_normal_quantile(p: float) -> float:
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"normal quantile needs p in (0, 1), got {p}")
    x = _acklam(p)
    # Halley-corrected Newton step; the upper tail is refined through the
    # complementary CDF so 1 - p does not lose digits.
    if p > 0.5:
        e = -(0.5 * math.erfc(x / math.sqrt(2.0)) - (1.0 - p))
    else:
        e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def binomial_lower_bound(successes: int, trials: int, confidence: float) -> float:
    """One-sided Clopper-Pearson lower bound on a success probability.

    Solves ``P[Bin(trials, p) >= successes] = 1 - confidence`` for ``p`` by
    bisection on the regularized incomplete beta function.
    """
    if trials < 1 or not 0 <= successes <= trials:
        raise ValueError(f"invalid counts: successes={successes}, trials={trials}")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    if successes == 0:
        return 0.0
    tail = 1.0 - confidence
    # P[X >= k] = I_p(k, n - k + 1), increasing in p
    a, b = float(successes), float(trials - successes + 1)
    lo, hi = 0.0, 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if special.betainc(a, b, mid) < tail:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return lo


def entropy(probs) -> float:
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("entropy needs a nonnegative vector summing to 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
