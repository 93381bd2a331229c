import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from difflab.numerics import (ProbabilityBound, RngStream, as_stream, binomial_lower_bound, entropy,
                              gaussian_sample, std_normal_cdf, std_normal_quantile)


# -- streams -------------------------------------------------------------------

def test_same_stream_same_draws():
    a = RngStream(7, 3).normal(1000)
    b = RngStream(7, 3).normal(1000)
    assert np.array_equal(a, b)


def test_derive_independent_of_parent_position():
    parent = RngStream(11)
    first = parent.derive("x", 2).normal(5)
    parent.normal(100)
    assert np.array_equal(first, parent.derive("x", 2).normal(5))


def test_derived_streams_uncorrelated():
    root = RngStream(5)
    a = root.derive("a").normal(100_000)
    b = root.derive("b").normal(100_000)
    # |corr| of independent samples has std 1/sqrt(n) ~ 0.003
    assert abs(np.corrcoef(a, b)[0, 1]) < 0.015
    assert not np.array_equal(a[:10], b[:10])


def test_split_is_reproducible_and_distinct():
    s1 = RngStream(9).split(4)
    s2 = RngStream(9).split(4)
    draws = [s.normal(3) for s in s1]
    assert all(np.array_equal(d, s.normal(3)) for d, s in zip(draws, s2))
    assert len({d.tobytes() for d in draws}) == 4


def test_as_stream():
    s = RngStream(3)
    assert as_stream(s) is s
    assert as_stream(3) == RngStream(3)


def test_gaussian_sample_moments():
    s = RngStream(1)
    x = np.array([gaussian_sample(s, 1)[0] for _ in range(100_000)])
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 1.0) < 0.05


def test_gaussian_sample_rejects_bad_dim():
    with pytest.raises(ValueError):
        gaussian_sample(RngStream(0), 0)


# -- normal distribution -----------------------------------------------------------

def test_cdf_known_values():
    assert std_normal_cdf(0.0) == 0.5
    assert std_normal_cdf(1.0) == pytest.approx(0.841345, abs=1e-6)


@pytest.mark.parametrize("z", [-8.0, -3.3, -1.0, -0.2, 0.0, 0.7, 2.5, 6.0])
def test_cdf_matches_mpmath(z):
    with mpmath.workdps(40):
        ref = float(mpmath.ncdf(z))
    assert std_normal_cdf(z) == pytest.approx(ref, rel=1e-13, abs=1e-300)


def test_quantile_center_and_domain():
    assert std_normal_quantile(0.5) == 0.0
    for p in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            std_normal_quantile(p)


def test_quantile_roundtrip_on_log_grid():
    lows = np.logspace(-6, np.log10(0.5), 60)
    grid = np.concatenate([lows, 1.0 - lows])
    for p in grid:
        assert abs(std_normal_cdf(std_normal_quantile(p)) - p) <= 1e-9


@pytest.mark.parametrize("p", [1e-6, 1e-3, 0.02, 0.3, 0.5, 0.841345, 0.975, 0.999, 1 - 1e-6])
def test_quantile_matches_mpmath(p):
    with mpmath.workdps(40):
        ref = float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(p) - 1))
    assert std_normal_quantile(p) == pytest.approx(ref, abs=1e-9)


@given(st.floats(min_value=1e-6, max_value=1 - 1e-6))
def test_quantile_is_monotone_inverse(p):
    q = std_normal_quantile(p)
    assert abs(std_normal_cdf(q) - p) <= 1e-9
    assert std_normal_quantile(min(p * 1.01, 1 - 1e-7)) >= q - 1e-12


# -- Clopper-Pearson -----------------------------------------------------------------

def test_binomial_lower_bound_zero_successes():
    assert binomial_lower_bound(0, 50, 0.99) == 0.0


def test_binomial_all_successes_closed_form():
    # all successes: lower bound solves p^n = 1 - confidence
    assert binomial_lower_bound(100, 100, 0.95) == pytest.approx(0.05 ** (1 / 100), abs=1e-12)
    assert binomial_lower_bound(100, 100, 0.95) == pytest.approx(0.9705, abs=1e-3)


def test_binomial_half_successes():
    v = binomial_lower_bound(50, 100, 0.95)
    assert 0.40 < v < 0.50


@pytest.mark.parametrize("k,n,conf", [(1, 10, 0.9), (37, 80, 0.999), (990, 1000, 0.999),
                                      (5000, 10000, 0.5), (9999, 10000, 0.999), (3, 3, 0.6)])
def test_binomial_matches_beta_quantile(k, n, conf):
    # independent route: the Clopper-Pearson lower limit is a beta quantile
    ref = stats.beta.ppf(1 - conf, k, n - k + 1)
    assert binomial_lower_bound(k, n, conf) == pytest.approx(ref, abs=1e-9)


def test_binomial_monotone_in_successes():
    vals = [binomial_lower_bound(k, 200, 0.99) for k in range(201)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


@given(st.integers(1, 500), st.data())
@settings(max_examples=60, deadline=None)
def test_binomial_bound_below_point_estimate(n, data):
    k = data.draw(st.integers(0, n))
    conf = data.draw(st.floats(0.5, 0.9999))
    lo = binomial_lower_bound(k, n, conf)
    assert 0.0 <= lo <= k / n + 1e-12


@pytest.mark.parametrize("k,n,conf", [(-1, 5, 0.9), (6, 5, 0.9), (1, 0, 0.9), (1, 5, 1.0), (1, 5, 0.0)])
def test_binomial_rejects_bad_arguments(k, n, conf):
    with pytest.raises(ValueError):
        binomial_lower_bound(k, n, conf)


# -- entropy and bounds -----------------------------------------------------------------

def test_entropy_examples():
    assert entropy([1, 0, 0, 0]) == 0.0
    assert entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-12)
    assert entropy([0.5, 0.5, 0, 0]) == pytest.approx(0.693147, abs=1e-6)


@pytest.mark.parametrize("bad", [[0.5, 0.6], [-0.1, 1.1], [], [[0.5, 0.5]]])
def test_entropy_rejects_malformed(bad):
    with pytest.raises(ValueError):
        entropy(bad)


@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=12))
def test_entropy_maximised_by_uniform(weights):
    w = np.asarray(weights)
    if w.sum() <= 1e-9:
        return
    p = w / w.sum()
    assert 0.0 <= entropy(p) <= math.log(len(p)) + 1e-12


def test_probability_bound_validation():
    ProbabilityBound(0.5, 0.4, 0.6, 0.9)
    with pytest.raises(ValueError):
        ProbabilityBound(0.5, 0.6, 0.7, 0.9)
    with pytest.raises(ValueError):
        ProbabilityBound(0.5, 0.4, 0.6, 1.0)
