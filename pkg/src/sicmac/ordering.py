"""
Decoding order from rate multipliers.

Smaller theta is decoded earlier. Users whose multipliers agree within a
relative tolerance form a cluster; any arrangement inside a cluster is an
equally valid order for the same allocation.
"""

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from sicmac.errors import DomainError, TooManyOrders
from sicmac.rate import DecodingOrder

logger = logging.getLogger(__name__)

__all__ = ["DualCertificate", "OrderClusters", "derive_order", "enumerate_orders"]

EPS_THETA = 1e-6
THETA_FLOOR = 1e-12
MAX_ORDERS = 720


@dataclass(frozen=True, eq=False)
class DualCertificate:
    """Rate multipliers theta and, for budget-constrained problems, energy multipliers lam."""

    theta: np.ndarray
    lam: np.ndarray | None = None

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float).reshape(-1)
        if np.any(~np.isfinite(theta)) or np.any(theta < 0):
            raise DomainError("theta must be finite and non-negative")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)
        if self.lam is not None:
            lam = np.array(self.lam, dtype=float).reshape(-1)
            if lam.shape != theta.shape or np.any(lam < 0):
                raise DomainError("lam must be non-negative with one entry per user")
            lam.flags.writeable = False
            object.__setattr__(self, "lam", lam)


@dataclass(frozen=True)
class OrderClusters:
    """Tie clusters, earliest decoded first, and the representative order."""

    clusters: tuple[tuple[int, ...], ...]
    canonical_order: DecodingOrder

    @property
    def num_orders(self) -> int:
        return math.prod(math.factorial(len(c)) for c in self.clusters)

    def has_ties(self) -> bool:
        return any(len(c) > 1 for c in self.clusters)


def derive_order(cert: DualCertificate | ArrayLike, eps_theta: float = EPS_THETA) -> OrderClusters:
    theta = cert.theta if isinstance(cert, DualCertificate) else np.asarray(cert, dtype=float).reshape(-1)
    if theta.size == 0:
        raise DomainError("need at least one multiplier")
    if np.any(theta < 0):
        raise DomainError("theta must be non-negative")

    ranked = sorted(range(theta.size), key=lambda u: (theta[u], u))
    clusters = [[ranked[0]]]
    for prev, cur in itertools.pairwise(ranked):
        scale = max(theta[prev], theta[cur], THETA_FLOOR)
        if abs(theta[cur] - theta[prev]) <= eps_theta * scale:
            clusters[-1].append(cur)
        else:
            clusters.append([cur])

    ordered = tuple(tuple(sorted(c)) for c in clusters)
    canonical = DecodingOrder(tuple(u for c in ordered for u in c))
    return OrderClusters(clusters=ordered, canonical_order=canonical)


def enumerate_orders(oc: OrderClusters, max_orders: int = MAX_ORDERS) -> list[DecodingOrder]:
    """All orders that permute users inside clusters, canonical order first."""
    count = oc.num_orders
    if count > max_orders:
        raise TooManyOrders(f"{count} candidate orders exceed the limit of {max_orders}", count=count)
    arrangements = [itertools.permutations(c) for c in oc.clusters]
    orders = [DecodingOrder(tuple(u for part in combo for u in part)) for combo in itertools.product(*arrangements)]
    logger.debug("enumerated %d decoding orders over %d clusters", len(orders), len(oc.clusters))
    return orders
