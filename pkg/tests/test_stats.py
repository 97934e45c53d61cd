import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from lungct_gan.stats import summary_consistent_sample, welch_t_test


def reference_pairs(n_pairs=20, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n_pairs):
        a = rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 5), size=rng.integers(2, 30))
        b = rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 5), size=rng.integers(2, 30))
        yield a, b


def welch_mismatch(n_pairs=20, seed=0):
    """Largest (|dt|, |dp|) against scipy's unequal-variance t-test."""
    worst_t = worst_p = 0.0
    for a, b in reference_pairs(n_pairs, seed):
        ours = welch_t_test(a, b)
        ref = sps.ttest_ind(a, b, equal_var=False)
        worst_t = max(worst_t, abs(ours.statistic - ref.statistic))
        worst_p = max(worst_p, abs(ours.pvalue - ref.pvalue))
    return worst_t, worst_p


def test_matches_reference():
    dt, dp = welch_mismatch()
    assert dt < 1e-9 and dp < 1e-6


def test_textbook_example():
    r = welch_t_test([1, 2, 3], [2, 3, 4])
    assert r.statistic == pytest.approx(-1.224744871, abs=1e-8)
    assert r.df == pytest.approx(4.0)
    assert r.pvalue == pytest.approx(0.2878641, abs=1e-6)


def test_identical_samples():
    r = welch_t_test([1.0, 2.0, 5.0], [1.0, 2.0, 5.0])
    assert r.statistic == 0.0 and r.pvalue == pytest.approx(1.0)


def test_widely_separated():
    assert welch_t_test([0, 0.1], [100, 100.1]).pvalue < 1e-4


@pytest.mark.parametrize("a,b,t,p", [([3, 3], [3, 3, 3], 0.0, 1.0),
                                     ([1, 1], [2, 2], -math.inf, 0.0),
                                     ([2, 2, 2], [1, 1], math.inf, 0.0)])
def test_degenerate_variance(a, b, t, p):
    r = welch_t_test(a, b)
    assert r.statistic == t and r.pvalue == p


def test_needs_two_values():
    with pytest.raises(ValueError):
        welch_t_test([1.0], [1.0, 2.0])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=12),
       st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=12))
def test_antisymmetric_and_bounded(a, b):
    if np.var(a) + np.var(b) == 0:
        return
    ab, ba = welch_t_test(a, b), welch_t_test(b, a)
    assert ab.statistic == pytest.approx(-ba.statistic)
    assert ab.pvalue == pytest.approx(ba.pvalue)
    assert 0.0 <= ab.pvalue <= 1.0


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 200), st.floats(0.01, 30), st.floats(0.1, 20), st.integers(3, 8))
def test_summary_sample_matches_summary(minimum, gap, sd, n):
    mean = minimum + gap
    try:
        x = summary_consistent_sample(minimum, mean, sd, n)
    except ValueError:
        return
    assert len(x) == n
    assert x.min() == pytest.approx(minimum)
    assert x.mean() == pytest.approx(mean)
    assert x.std(ddof=1) == pytest.approx(sd)


def test_summary_infeasible():
    with pytest.raises(ValueError):
        summary_consistent_sample(10.0, 10.1, 5.0, n=5)


def test_stylegan_minima_significant():
    # min / mean / sd rows of the five-run FID table: styleGAN3D-base vs styleGAN3D-MDmin
    base = summary_consistent_sample(122.3, 136.9, 10.7)
    mdmin = summary_consistent_sample(41.0, 44.8, 4.2)
    r = welch_t_test(base, mdmin)
    assert r.statistic > 0
    assert r.pvalue < 1e-3
