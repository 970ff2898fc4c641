"""
Comparison schemes.

* OMA: round-robin subcarrier ownership, each user water-fills its own subcarriers.
* NOMA: every user spreads its budget flat over all subcarriers, SIC in channel-strength order.
* MC-NOMA: per-subcarrier power optimization, but SIC still in channel-strength order.

Rates always come from ``sicmac.rate.sic_rates``.
"""

import logging
from dataclasses import dataclass

import numpy as np

from sicmac.channel import ChannelSet
from sicmac.errors import DomainError, Infeasible
from sicmac.rate import DecodingOrder, PowerAllocation, RateMatrix, sic_rates
from sicmac.solver import AllocationResult, EnergyBudget, RateRequirement, SolverOptions, max_rate_allocate
from sicmac.waterfill import water_fill_budget, water_fill_target

logger = logging.getLogger(__name__)

__all__ = [
    "OmaAssignment",
    "BaselineResult",
    "oma_allocate",
    "channel_strength_order",
    "noma_allocate",
    "noma_rates",
    "mc_noma_allocate",
]


@dataclass(frozen=True, eq=False)
class OmaAssignment:
    subcarrier_owner: np.ndarray

    @classmethod
    def round_robin(cls, num_users: int, num_subcarriers: int) -> "OmaAssignment":
        return cls(np.arange(num_subcarriers) % num_users)

    def owned_by(self, user: int) -> np.ndarray:
        return self.subcarrier_owner == user


@dataclass(frozen=True, eq=False)
class BaselineResult:
    alloc: PowerAllocation
    rates: RateMatrix
    order: DecodingOrder
    assignment: OmaAssignment | None = None


def oma_allocate(ch: ChannelSet, targets: EnergyBudget | RateRequirement) -> BaselineResult:
    """
    OFDMA with a linear (maximal-ratio) receiver.

    With an EnergyBudget each user maximizes its rate on its own subcarriers;
    with a RateRequirement it spends the least energy meeting its target.
    """
    users, n_sub = ch.num_users, ch.num_subcarriers
    if n_sub < users:
        raise DomainError(f"OMA needs at least one subcarrier per user ({n_sub} < {users})")
    assignment = OmaAssignment.round_robin(users, n_sub)
    gains = np.sum(np.abs(ch.vectors()) ** 2, axis=2) / ch.noise_variance

    energy = np.zeros((users, n_sub))
    for u in range(users):
        owned = assignment.owned_by(u)
        if isinstance(targets, EnergyBudget):
            energy[u, owned] = water_fill_budget(gains[u, owned], float(targets.e_max[u]))
        else:
            try:
                energy[u, owned] = water_fill_target(gains[u, owned], float(targets.b_min[u]))
            except Infeasible as exc:
                raise Infeasible(f"user {u + 1} cannot reach its target on its OMA subcarriers") from exc

    alloc = PowerAllocation(energy)
    # one user per subcarrier: any order gives the interference-free rates
    order = DecodingOrder.identity(users)
    return BaselineResult(alloc=alloc, rates=sic_rates(ch, alloc, order), order=order, assignment=assignment)


def channel_strength_order(ch: ChannelSet) -> DecodingOrder:
    """Strongest aggregate channel decoded first, ties by user index."""
    strengths = ch.strengths()
    return DecodingOrder(tuple(sorted(range(ch.num_users), key=lambda u: (-strengths[u], u))))


def noma_allocate(ch: ChannelSet, budget: EnergyBudget) -> BaselineResult:
    """Flat per-user power over the whole band."""
    if budget.e_max.shape != (ch.num_users,):
        raise DomainError("budget needs one entry per user")
    energy = np.repeat((budget.e_max / ch.num_subcarriers)[:, None], ch.num_subcarriers, axis=1)
    alloc = PowerAllocation(energy)
    order = channel_strength_order(ch)
    return BaselineResult(alloc=alloc, rates=sic_rates(ch, alloc, order), order=order)


def noma_rates(ch: ChannelSet, budget: EnergyBudget) -> RateMatrix:
    return noma_allocate(ch, budget).rates


def mc_noma_allocate(ch: ChannelSet, budget: EnergyBudget, opt: SolverOptions | None = None) -> AllocationResult:
    """Sum-rate power allocation with the decoding order fixed to channel strength."""
    equal = EnergyBudget(budget.e_max, np.ones(ch.num_users))
    return max_rate_allocate(ch, equal, opt, order=channel_strength_order(ch))
