"""Jacobian logarithm (max*) primitives for log-domain probability math.

max*(a, b) = max(a, b) + log(1 + exp(-|a - b|)) is the numerically stable
form of log(e^a + e^b).  Folding it over a set gives log-sum-exp exactly,
which is what every soft-output computation in this package reduces to.
"""

import math

import numpy as np

NEG_INF = float("-inf")


def max_star(a: float, b: float) -> float:
    """Pairwise max*: log(e^a + e^b) without overflow.

    -inf is the identity element, so empty hypothesis sets can be folded
    starting from -inf.
    """
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    return max(a, b) + math.log1p(math.exp(-abs(a - b)))


def max_star_reduce(values) -> float:
    """Left fold of max* over an iterable; returns -inf for empty input."""
    acc = NEG_INF
    for v in values:
        acc = max_star(acc, v)
    return acc


def logsumexp_axis(x: np.ndarray, axis) -> np.ndarray:
    """Vectorized log-sum-exp along `axis`.

    Equivalent to folding max* over that axis; used where message tables
    are updated in bulk.  All-(-inf) slices reduce to -inf without NaNs.
    """
    m = np.max(x, axis=axis, keepdims=True)
    # protect exp(-inf - -inf); the masked slices come out as -inf below
    safe = np.where(np.isneginf(m), 0.0, m)
    s = np.sum(np.exp(x - safe), axis=axis)
    out = np.squeeze(safe, axis=axis) + np.log(s, out=np.full(s.shape, -np.inf), where=s > 0)
    return out
