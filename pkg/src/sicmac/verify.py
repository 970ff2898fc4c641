"""
Invariant checks over random scenarios.

Every check returns a CheckResult; ``run_checks`` logs each one and the CLI
turns any failure into exit code 1.
"""

import itertools
import logging
from collections.abc import Callable, Iterable
from dataclasses import dataclass

import numpy as np

from sicmac.baselines import oma_allocate
from sicmac.channel import ChannelSet, ScenarioConfig, generate_channels
from sicmac.errors import SimulationError
from sicmac.harness import REFERENCE_TIMESHARE_TARGET, reference_schedule
from sicmac.rate import DecodingOrder, PowerAllocation, polymatroid_violation, sic_rates, subset_capacity
from sicmac.solver import EnergyBudget, RateRequirement, SolverOptions, min_energy_allocate

logger = logging.getLogger(__name__)

__all__ = ["CheckResult", "CHECKS", "run_checks"]

RATE_ATOL = 1e-8
TIMESHARE_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    passed: bool
    detail: str = ""


def _scenario(seed: int) -> ScenarioConfig:
    return ScenarioConfig(num_users=3, ap_antennas=2, num_subcarriers=16, seed=seed)


def _random_alloc(ch: ChannelSet, seed: int) -> PowerAllocation:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(99,)))
    scale = ch.noise_variance / max(float(ch.gains().mean()), 1e-300)
    return PowerAllocation(rng.exponential(10 * scale, size=(ch.num_users, ch.num_subcarriers)))


def _all_orders(users: int) -> Iterable[DecodingOrder]:
    return (DecodingOrder(p) for p in itertools.permutations(range(users)))


def check_telescoping(ch: ChannelSet, alloc: PowerAllocation) -> tuple[bool, str]:
    order = DecodingOrder.identity(ch.num_users)
    total = sic_rates(ch, alloc, order).total()
    capacity = subset_capacity(ch, alloc, range(ch.num_users))
    return abs(total - capacity) <= RATE_ATOL * max(1.0, capacity), f"sum={total:.6g} capacity={capacity:.6g}"


def check_order_sum(ch: ChannelSet, alloc: PowerAllocation) -> tuple[bool, str]:
    totals = [sic_rates(ch, alloc, order).total() for order in _all_orders(ch.num_users)]
    spread = max(totals) - min(totals)
    return spread <= RATE_ATOL * max(1.0, max(totals)), f"spread={spread:.3g}"


def check_polymatroid(ch: ChannelSet, alloc: PowerAllocation) -> tuple[bool, str]:
    worst = max(polymatroid_violation(ch, alloc, order) for order in _all_orders(ch.num_users))
    return worst <= RATE_ATOL * max(1.0, subset_capacity(ch, alloc, range(ch.num_users))), f"worst excess={worst:.3g}"


def check_last_decoded(ch: ChannelSet, alloc: PowerAllocation) -> tuple[bool, str]:
    worst, scale = 0.0, 1.0
    for order in _all_orders(ch.num_users):
        last = order.order[-1]
        got = sic_rates(ch, alloc, order).per_user()[last]
        alone = subset_capacity(ch, alloc, [last])
        worst, scale = max(worst, abs(got - alone)), max(scale, alone)
    return worst <= RATE_ATOL * scale, f"worst gap={worst:.3g}"


def check_oma_order_independence(ch: ChannelSet, alloc: PowerAllocation) -> tuple[bool, str]:
    budget = EnergyBudget(alloc.per_user())
    oma = oma_allocate(ch, budget)
    reference = oma.rates.bits
    worst = max(
        float(np.max(np.abs(sic_rates(ch, oma.alloc, order).bits - reference))) for order in _all_orders(ch.num_users)
    )
    return worst <= RATE_ATOL, f"worst gap={worst:.3g}"


def check_reference_timeshare(ch: ChannelSet, alloc: PowerAllocation) -> tuple[bool, str]:
    schedule = reference_schedule(TIMESHARE_TOL)
    achieved = schedule.average_rates()
    target = np.asarray(REFERENCE_TIMESHARE_TARGET)
    ok = bool(np.all(achieved >= target - TIMESHARE_TOL * target)) and abs(schedule.weights().sum() - 1) <= 1e-9
    return ok, schedule.summary()


def check_theta_order(ch: ChannelSet, alloc: PowerAllocation) -> tuple[bool, str]:
    # targets at half the rates of the random allocation are always reachable
    b_min = 0.5 * sic_rates(ch, alloc, DecodingOrder.identity(ch.num_users)).per_user()
    opt = SolverOptions()
    result = min_energy_allocate(ch, RateRequirement(b_min), opt)
    theta = result.cert.theta
    for entry in result.schedule.entries:
        decoded = theta[list(entry.order.order)]
        drops = decoded[:-1] - decoded[1:]
        if np.any(drops > opt.tie_tol * np.maximum(decoded[:-1], 1e-12)):
            return False, f"order {entry.order.label()} against theta {np.round(theta, 6).tolist()}"
    achieved = result.achieved_rates()
    if np.any(achieved < b_min * (1 - 10 * opt.rate_tol) - RATE_ATOL):
        return False, f"achieved {np.round(achieved, 4).tolist()} below {np.round(b_min, 4).tolist()}"
    return True, f"order {result.order.label()} in {result.iterations} iteration(s)"


CHECKS: dict[str, Callable[[ChannelSet, PowerAllocation], tuple[bool, str]]] = {
    "telescoping": check_telescoping,
    "order_sum": check_order_sum,
    "polymatroid": check_polymatroid,
    "last_decoded": check_last_decoded,
    "oma_order_independence": check_oma_order_independence,
    "reference_timeshare": check_reference_timeshare,
    "theta_order": check_theta_order,
}


def run_checks(seeds: Iterable[int], names: Iterable[str] | None = None) -> list[CheckResult]:
    selected = list(names) if names is not None else list(CHECKS)
    results = []
    for seed in seeds:
        ch = generate_channels(_scenario(seed))
        alloc = _random_alloc(ch, seed)
        for name in selected:
            try:
                passed, detail = CHECKS[name](ch, alloc)
            except SimulationError as e:
                passed, detail = False, f"{type(e).__name__}: {e}"
            result = CheckResult(name=name, seed=seed, passed=passed, detail=detail)
            if passed:
                logger.info("%s (seed %d): pass %s", name, seed, detail)
            else:
                logger.error("%s (seed %d): FAIL %s", name, seed, detail)
            results.append(result)
    return results
