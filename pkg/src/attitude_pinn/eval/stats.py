"""Two-sided Wilcoxon signed-rank test."""

import math

import numpy as np
from scipy.stats import rankdata

EXACT_MAX_N = 25


def _signed_rank_inputs(a, b):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if d.ndim != 1:
        raise ValueError("paired samples must be one-dimensional and of equal length")
    if not np.all(np.isfinite(d)):
        raise ValueError("paired samples must be finite")
    d = d[d != 0.0]
    ranks = rankdata(np.abs(d))
    return d, ranks


def _exact_p(ranks, w_plus):
    """Exact null of W+ by dynamic programming over doubled (integer) ranks.

    Mid-ranks of tied values are multiples of 1/2, so doubling makes every rank an
    integer and the count of sign patterns per attainable sum is exact.
    """
    r2 = np.rint(2.0 * ranks).astype(np.int64)
    total = int(r2.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in r2:
        counts[r:] = counts[r:] + counts[:-r]
    probs = counts / 2.0 ** len(r2)
    w2 = int(round(2.0 * w_plus))
    lower = probs[:w2 + 1].sum()
    upper = probs[w2:].sum()
    return min(1.0, 2.0 * min(lower, upper))


def _normal_p(ranks, w_plus):
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def wilcoxon_signed_rank(a, b):
    """p-value for the hypothesis that paired differences ``a - b`` are symmetric about zero.

    Zero differences are dropped. Up to 25 remaining pairs use the exact null
    distribution (ties handled through mid-ranks); larger samples use the normal
    approximation with tie and continuity corrections. Returns 1.0 when every
    difference is zero.
    """
    d, ranks = _signed_rank_inputs(a, b)
    if len(d) == 0:
        return 1.0
    w_plus = float(ranks[d > 0].sum())
    if len(d) <= EXACT_MAX_N:
        return float(_exact_p(ranks, w_plus))
    return float(_normal_p(ranks, w_plus))


def enumerate_p(a, b):
    """Reference p-value by brute force over all sign assignments (small n only)."""
    d, ranks = _signed_rank_inputs(a, b)
    n = len(d)
    if n == 0:
        return 1.0
    if n > 20:
        raise ValueError("enumeration is limited to 20 pairs")
    w_obs = ranks[d > 0].sum()
    signs = ((np.arange(2 ** n)[:, None] >> np.arange(n)) & 1).astype(float)
    w_all = signs @ ranks
    tol = 1e-9
    lower = np.mean(w_all <= w_obs + tol)
    upper = np.mean(w_all >= w_obs - tol)
    return float(min(1.0, 2.0 * min(lower, upper)))
