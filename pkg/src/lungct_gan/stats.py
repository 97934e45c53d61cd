from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy.special import betainc


class WelchResult(NamedTuple):
    statistic: float
    pvalue: float
    df: float


def welch_t_test(a, b) -> WelchResult:
    """Two-sided Welch t-test with Welch-Satterthwaite degrees of freedom."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("Welch's test needs at least two values per sample")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return WelchResult(0.0, 1.0, float("nan"))
        return WelchResult(math.copysign(math.inf, diff), 0.0, float("nan"))
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    # P(|T| > |t|) for Student's t with df degrees of freedom
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return WelchResult(float(t), min(p, 1.0), float(df))


def summary_consistent_sample(minimum: float, mean: float, sd: float, n: int = 5) -> np.ndarray:
    """A size-n sample whose minimum, mean and sample SD match the given summary.

    Shape: the minimum plus n-1 values spread as c + e * [-1, ..., -1, n-2].
    Used to rebuild per-run minima from published min / mean +- SD rows.
    """
    if n < 3:
        raise ValueError("need n >= 3")
    c = (n * mean - minimum) / (n - 1)
    rest = (n - 1) * sd**2 - (minimum - mean) ** 2 - (n - 1) * (c - mean) ** 2
    if rest < 0:
        raise ValueError(f"no sample of size {n} has min {minimum}, mean {mean}, sd {sd}")
    e = math.sqrt(rest / ((n - 2) * (n - 1)))
    if c - e < minimum:
        raise ValueError(f"summary ({minimum}, {mean}, {sd}) needs values below the minimum")
    pattern = np.array([-1.0] * (n - 2) + [n - 2.0])
    return np.concatenate([[minimum], c + e * pattern])
