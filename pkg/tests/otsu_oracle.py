"""Brute-force Otsu reference: try every boundary k/256, split pixels directly, exact arithmetic."""

from fractions import Fraction

import numpy as np


def quantize(values):
    # 256 equal-width bins over (0, 1] plus exact zero; pixel v sits at level ceil(256 v)
    levels = []
    for v in np.asarray(values, dtype=np.float64).ravel():
        levels.append(min(max(int(np.ceil(v * 256)), 0), 256))
    return levels


def brute_force_otsu(values):
    levels = quantize(values)
    pixels = list(zip(levels, np.asarray(values, np.float64).ravel().tolist()))
    n = len(levels)
    best_t, best = 1.0, Fraction(0)
    for k in range(256):
        t = k / 256
        lower = [q for q, v in pixels if not v > t]
        upper = [q for q, v in pixels if v > t]
        if not lower or not upper:
            continue
        w0, w1 = Fraction(len(lower), n), Fraction(len(upper), n)
        mu0, mu1 = Fraction(sum(lower), len(lower)), Fraction(sum(upper), len(upper))
        score = w0 * w1 * (mu1 - mu0) ** 2
        if score > best:
            best_t, best = t, score
    return best_t
