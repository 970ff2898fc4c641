"""
Time sharing between decoding orders.

Each candidate order yields a per-user rate vector under one fixed
allocation. A schedule picks the fewest orders whose time-weighted average
reaches the per-user target.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike
from scipy.optimize import linprog, nnls

from sicmac.channel import ChannelSet
from sicmac.errors import DomainError, Infeasible
from sicmac.rate import DecodingOrder, PowerAllocation, sic_rates

logger = logging.getLogger(__name__)

__all__ = [
    "CandidateRates",
    "ScheduleEntry",
    "TimeShareSchedule",
    "rates_per_order",
    "solve_timeshare",
    "balanced_target",
    "read_schedule_csv",
]

RATE_TOL = 1e-3
MAX_SUBSETS = 200_000
SUM_ROW_WEIGHT = 1e3
WEIGHT_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class CandidateRates:
    """Rows of per-user rates, one per candidate order."""

    orders: tuple[DecodingOrder, ...]
    rates: np.ndarray

    def __post_init__(self):
        rates = np.array(self.rates, dtype=float)
        orders = tuple(self.orders)
        if not orders:
            raise DomainError("need at least one candidate order")
        if rates.ndim != 2 or rates.shape[0] != len(orders):
            raise DomainError(f"rates shape {rates.shape} does not match {len(orders)} orders")
        if any(len(o) != rates.shape[1] for o in orders):
            raise DomainError("every order must cover all users")
        if np.any(rates < 0):
            raise DomainError("candidate rates must be non-negative")
        rates.flags.writeable = False
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "rates", rates)

    @property
    def num_users(self) -> int:
        return self.rates.shape[1]

    def __len__(self) -> int:
        return len(self.orders)


@dataclass(frozen=True, eq=False)
class ScheduleEntry:
    order: DecodingOrder
    weight: float
    rates: np.ndarray


@dataclass(frozen=True)
class TimeShareSchedule:
    entries: tuple[ScheduleEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise DomainError("a schedule needs at least one entry")
        weights = self.weights()
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise DomainError(f"schedule weights must be non-negative and sum to 1, got {weights}")

    @classmethod
    def single(cls, order: DecodingOrder, rates: ArrayLike) -> "TimeShareSchedule":
        return cls((ScheduleEntry(order, 1.0, np.asarray(rates, dtype=float)),))

    def weights(self) -> np.ndarray:
        return np.array([e.weight for e in self.entries])

    def average_rates(self) -> np.ndarray:
        return np.sum([e.weight * e.rates for e in self.entries], axis=0)

    def summary(self) -> str:
        """Compact form for result tables, e.g. ``3-2-1:0.5203;1-3-2:0.1705``."""
        return ";".join(f"{e.order.label()}:{e.weight:.4f}" for e in self.entries)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for entry in self.entries:
            row = {"order": entry.order.label(), "weight": entry.weight}
            row.update({f"rate_u{u + 1}": float(r) for u, r in enumerate(entry.rates)})
            rows.append(row)
        return pd.DataFrame(rows)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        self.to_frame().to_csv(path, index=False, float_format="%.6g")
        return path

    def __len__(self) -> int:
        return len(self.entries)


def read_schedule_csv(path: str | Path) -> TimeShareSchedule:
    frame = pd.read_csv(path)
    rate_cols = [c for c in frame.columns if c.startswith("rate_u")]
    entries = tuple(
        ScheduleEntry(DecodingOrder.parse(str(row["order"])), float(row["weight"]), row[rate_cols].to_numpy(float))
        for _, row in frame.iterrows()
    )
    total = sum(e.weight for e in entries)
    # CSV keeps 6 significant digits; renormalize the weights
    return TimeShareSchedule(tuple(ScheduleEntry(e.order, e.weight / total, e.rates) for e in entries))


def rates_per_order(ch: ChannelSet, alloc: PowerAllocation, orders: list[DecodingOrder]) -> CandidateRates:
    """Aggregate per-user SIC rates (bits per OFDM symbol) for each order under one allocation."""
    if not orders:
        raise DomainError("need at least one order")
    rows = np.array([sic_rates(ch, alloc, order).per_user() for order in orders])
    return CandidateRates(tuple(orders), rows)


def _within_tol(average: np.ndarray, target: np.ndarray, tol: float, scale: float) -> bool:
    allowed = tol * np.maximum(np.abs(target), 1e-9 * scale)
    return bool(np.all(np.abs(average - target) <= allowed))


def _fit_weights(rows: np.ndarray, target: np.ndarray, scale: float) -> np.ndarray | None:
    """Non-negative weights reproducing ``target`` from ``rows``, normalized to sum 1."""
    k = rows.shape[0]
    system = np.vstack([rows.T / scale, SUM_ROW_WEIGHT * np.ones((1, k))])
    rhs = np.concatenate([target / scale, [SUM_ROW_WEIGHT]])
    weights, _ = nnls(system, rhs)
    total = weights.sum()
    if total <= 0:
        return None
    return weights / total


def _schedule(cand: CandidateRates, subset: tuple[int, ...], weights: np.ndarray) -> TimeShareSchedule:
    weights = weights / weights.sum()
    return TimeShareSchedule(
        tuple(ScheduleEntry(cand.orders[i], float(w), cand.rates[i].copy()) for i, w in zip(subset, weights, strict=True))
    )


def _vertex_schedule(cand: CandidateRates, target: np.ndarray, tol: float, scale: float) -> TimeShareSchedule:
    m = len(cand)
    res = linprog(
        c=np.zeros(m),
        A_eq=np.vstack([cand.rates.T / scale, np.ones((1, m))]),
        b_eq=np.concatenate([target / scale, [1.0]]),
        bounds=[(0, None)] * m,
        method="highs-ds",
    )
    if res.status != 0:
        raise Infeasible(f"target outside the hull of {m} candidate rate vectors ({res.message})")
    support = tuple(int(i) for i in np.flatnonzero(res.x > WEIGHT_FLOOR))
    schedule = _schedule(cand, support, res.x[list(support)])
    if not _within_tol(schedule.average_rates(), target, tol, scale):
        raise Infeasible("linear-programming vertex misses the target beyond tolerance")
    logger.warning("time-sharing support of %d orders found by LP; minimality not certified", len(support))
    return schedule


def solve_timeshare(
    cand: CandidateRates,
    b_min: ArrayLike,
    tol: float = RATE_TOL,
    max_subsets: int = MAX_SUBSETS,
) -> TimeShareSchedule:
    """
    Smallest set of orders whose weighted average meets ``b_min`` within ``tol`` per user.

    Subsets are tried by increasing size up to U + 1, lexicographically within a
    size, so the first feasible subset is both minimal and deterministic.
    """
    target = np.asarray(b_min, dtype=float).reshape(-1)
    if target.size != cand.num_users:
        raise DomainError(f"target has {target.size} entries for {cand.num_users} users")
    if np.any(target < 0):
        raise DomainError("target rates must be non-negative")

    m = len(cand)
    scale = max(float(np.abs(cand.rates).max()), float(np.abs(target).max()), 1e-300)
    max_size = min(m, cand.num_users + 1)
    total_subsets = sum(math.comb(m, k) for k in range(1, max_size + 1))
    if total_subsets > max_subsets:
        return _vertex_schedule(cand, target, tol, scale)

    for size in range(1, max_size + 1):
        for subset in itertools.combinations(range(m), size):
            rows = cand.rates[list(subset)]
            weights = _fit_weights(rows, target, scale)
            # a zero weight means a smaller subset was already tried
            if weights is None or (size > 1 and np.any(weights <= WEIGHT_FLOOR)):
                continue
            if _within_tol(weights @ rows, target, tol, scale):
                logger.debug("time-sharing feasible with %d order(s): %s", size, [cand.orders[i].label() for i in subset])
                return _schedule(cand, subset, weights)

    raise Infeasible(f"target {np.round(target, 6).tolist()} is outside the hull of the {m} candidate orders")


def balanced_target(cand: CandidateRates) -> np.ndarray:
    """Max-min fair point of the candidates' convex hull."""
    m, users = cand.rates.shape
    # variables: m weights then the common floor s; maximize s
    cost = np.zeros(m + 1)
    cost[-1] = -1.0
    a_ub = np.hstack([-cand.rates.T, np.ones((users, 1))])
    a_eq = np.concatenate([np.ones(m), [0.0]])[None, :]
    res = linprog(
        c=cost,
        A_ub=a_ub,
        b_ub=np.zeros(users),
        A_eq=a_eq,
        b_eq=[1.0],
        bounds=[(0, None)] * m + [(None, None)],
        method="highs",
    )
    if res.status != 0:
        raise Infeasible(f"max-min time sharing failed: {res.message}")
    weights = np.maximum(res.x[:m], 0.0)
    return (weights / weights.sum()) @ cand.rates
