"""Independent reference values used by the test suite.

Nothing here imports the package under test.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def norm_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def black_scholes_put(spot: float, strike: float, sigma: float, tau: float, rate: float = 0.0) -> float:
    """European put price in closed form."""
    vol = sigma * math.sqrt(tau)
    d1 = (math.log(spot / strike) + (rate + 0.5 * sigma**2) * tau) / vol
    d2 = d1 - vol
    return strike * math.exp(-rate * tau) * norm_cdf(-d2) - spot * norm_cdf(-d1)


def crr_american_put(spot: float, strike: float, sigma: float, tau: float, steps: int = 2000,
                     rate: float = 0.0) -> float:
    """Cox-Ross-Rubinstein binomial tree with early exercise."""
    dt = tau / steps
    up = math.exp(sigma * math.sqrt(dt))
    down = 1.0 / up
    q = (math.exp(rate * dt) - down) / (up - down)
    disc = math.exp(-rate * dt)
    j = np.arange(steps + 1)
    prices = spot * up ** (steps - j) * down**j
    values = np.maximum(strike - prices, 0.0)
    for n in range(steps - 1, -1, -1):
        prices = prices[: n + 1] * down
        values = np.maximum(strike - prices, disc * (q * values[:-1] + (1 - q) * values[1:]))
    return float(values[0])


def brute_force_w2(a, b) -> float:
    """W2 between equal-size point clouds by enumerating every permutation."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    n = a.shape[0]
    best = math.inf
    for perm in itertools.permutations(range(n)):
        cost = sum(float(np.sum((a[i] - b[p]) ** 2)) for i, p in enumerate(perm))
        best = min(best, cost)
    return math.sqrt(best / n)


# Reference price at spot = strike = 1, sigma = 0.2, one year, zero rate.
BS_PUT_ATM = black_scholes_put(1.0, 1.0, 0.2, 1.0)
