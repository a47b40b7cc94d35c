from __future__ import annotations

import numpy as np
import pytest


def naive_tspl_weights(alpha, delta, cutoff, dt):
    """Straight loop over lags; independent of the vectorized implementation."""
    raw = [1.0 / (l * dt + delta) ** alpha for l in range(cutoff + 1)]
    z = 1.0 / (sum(raw) * dt)
    return [z * x for x in raw]


def naive_features(returns, alpha1, delta1, c1, alpha2, delta2, c2, t, dt):
    w1 = naive_tspl_weights(alpha1, delta1, c1, dt)
    w2 = naive_tspl_weights(alpha2, delta2, c2, dt)
    r1 = 0.0
    for l in range(c1 + 1):
        r1 += w1[l] * returns[t - l]
    s2 = 0.0
    for l in range(c2 + 1):
        s2 += w2[l] * returns[t - l] ** 2
    return r1, s2 ** 0.5


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
