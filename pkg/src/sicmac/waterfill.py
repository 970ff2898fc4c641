"""Single-user water-filling over parallel subchannels."""

import numpy as np
from numpy.typing import ArrayLike
from scipy.optimize import brentq

from sicmac.errors import DomainError, Infeasible

__all__ = [
    "water_fill_budget",
    "water_fill_target",
    "water_level_for_budget",
    "water_level_for_target",
]


def _gains(gains: ArrayLike) -> np.ndarray:
    g = np.asarray(gains, dtype=float)
    if g.ndim != 1 or np.any(g < 0) or np.any(~np.isfinite(g)):
        raise DomainError("gains must be a vector of finite non-negative values")
    return g


def water_level_for_budget(gains: ArrayLike, budget: float) -> float:
    """
    Water level nu with sum_n max(0, nu - 1/g_n) = budget.

    Channels are sorted strongest first and the weakest is dropped until the
    level sits above every remaining floor.
    """
    g = _gains(gains)
    if budget < 0:
        raise DomainError(f"budget must be non-negative, got {budget}")
    floors = np.sort(1.0 / g[g > 0])
    if floors.size == 0:
        return 0.0
    for k in range(floors.size, 0, -1):
        level = (budget + floors[:k].sum()) / k
        if level >= floors[k - 1]:
            return float(level)
    return float(floors[0] + budget)


def water_fill_budget(gains: ArrayLike, budget: float) -> np.ndarray:
    """Rate-maximizing powers p_n = max(0, nu - 1/g_n) with sum p_n = budget; g is gain over noise."""
    g = _gains(gains)
    if budget < 0:
        raise DomainError(f"budget must be non-negative, got {budget}")
    powers = np.zeros_like(g)
    if budget == 0 or not np.any(g > 0):
        return powers
    level = water_level_for_budget(g, budget)
    usable = g > 0
    powers[usable] = np.maximum(level - 1.0 / g[usable], 0.0)
    return powers


def _rate_at(log_level: float, log_gains: np.ndarray) -> float:
    return float(np.maximum(log_level + log_gains, 0.0).sum())


def water_level_for_target(gains: ArrayLike, bits: float) -> float:
    """Water level nu whose water-filling powers deliver exactly ``bits`` in total."""
    g = _gains(gains)
    if bits < 0:
        raise DomainError(f"target must be non-negative, got {bits}")
    usable = g[g > 0]
    if bits == 0:
        return float(1.0 / usable.max()) if usable.size else 0.0
    if usable.size == 0:
        raise Infeasible("no usable subchannel for a positive rate target")
    log_gains = np.log2(usable)
    lo = -float(log_gains.max())
    hi = -float(log_gains.min()) + bits
    log_level = brentq(lambda t: _rate_at(t, log_gains) - bits, lo, hi, xtol=1e-14, rtol=1e-14)
    return float(2.0**log_level)


def water_fill_target(gains: ArrayLike, bits: float) -> np.ndarray:
    """Minimum-energy powers delivering ``bits`` over the subchannels."""
    g = _gains(gains)
    powers = np.zeros_like(g)
    if bits == 0:
        return powers
    level = water_level_for_target(g, bits)
    usable = g > 0
    powers[usable] = np.maximum(level - 1.0 / g[usable], 0.0)
    return powers
