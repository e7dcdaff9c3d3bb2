import math

import numpy as np
from scipy.special import xlogy


def alpha_utility(rate: float, alpha: float) -> float:
    """u(r, alpha): ln r for alpha == 1, r^(1 - alpha) / (1 - alpha) otherwise."""
    if alpha == 1:
        return math.log(rate) if rate > 0 else -math.inf
    if rate <= 0:
        return 0.0 if alpha < 1 else -math.inf
    return rate ** (1 - alpha) / (1 - alpha)


def xlogx(x):
    """x ln x with 0 ln 0 = 0, elementwise for arrays."""
    return xlogy(x, x)


def sgn(x: float) -> float:
    # sgn(0) = 1 so that the relative threshold keeps its sign at g = 0
    return 1.0 if x >= 0 else -1.0


def tilde_weight(weight, alpha: float):
    """w~ = (w / |alpha - 1|)^(1/alpha); for alpha == 1 the weight itself."""
    if alpha == 1:
        return np.asarray(weight, dtype=float)
    return (np.asarray(weight, dtype=float) / abs(alpha - 1)) ** (1 / alpha)


def relative_change(new: float, old: float) -> float:
    return abs(new - old) / max(abs(old), 1e-300)
