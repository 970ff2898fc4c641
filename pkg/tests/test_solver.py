#!/usr/bin/env python3
"""
Unit tests for the power allocation solvers.

Run with: pytest tests/test_solver.py -v
"""

import unittest

import numpy as np

from sicmac.channel import ChannelSet
from sicmac.errors import DomainError, Infeasible, NotConverged
from sicmac.ordering import derive_order
from sicmac.rate import DecodingOrder, PowerAllocation, polymatroid_violation, sic_rates
from sicmac.solver import (
    EnergyBudget,
    RateRequirement,
    SolverOptions,
    inner_weighted_max,
    max_rate_allocate,
    min_energy_allocate,
)
from sicmac.timeshare import rates_per_order
from sicmac.waterfill import water_fill_budget


def _random_channel(seed: int, users: int = 3, n_sub: int = 8, ap: int = 2) -> ChannelSet:
    rng = np.random.default_rng(seed)
    h = (rng.standard_normal((users, n_sub, ap)) + 1j * rng.standard_normal((users, n_sub, ap))) / np.sqrt(2)
    return ChannelSet.from_vectors(h, 1.0)


def _recovered_rates(ch: ChannelSet, primal, dual) -> np.ndarray:
    """
    Per-user rates of the max-rate solution, time-shared like the min-energy schedule.

    Tied multipliers fix only the cluster's sum rate, so the split inside a
    cluster comes from the primal's schedule; with one entry this is the
    max-rate rate vector itself.
    """
    if len(primal.schedule) == 1:
        return dual.rates.per_user()
    orders = [entry.order for entry in primal.schedule.entries]
    return primal.schedule.weights() @ rates_per_order(ch, dual.alloc, orders).rates


class TestOptions(unittest.TestCase):
    def test_positive(self):
        with self.assertRaises(DomainError):
            SolverOptions(rate_tol=0.0)
        with self.assertRaises(DomainError):
            SolverOptions(max_outer_iters=0)

    def test_requirement_validation(self):
        with self.assertRaises(DomainError):
            RateRequirement([1.0, -1.0])
        with self.assertRaises(DomainError):
            RateRequirement([1.0, 1.0], weights=[1.0])
        np.testing.assert_array_equal(RateRequirement([1.0, 2.0]).weights, [1.0, 1.0])

    def test_budget_defaults(self):
        np.testing.assert_array_equal(EnergyBudget([1.0, 2.0]).theta_w, [1.0, 1.0])


class TestInnerWeightedMax(unittest.TestCase):
    def test_zero_weights_give_zero_power(self):
        ch = _random_channel(0, users=2, n_sub=4)
        sol = inner_weighted_max(ch, [0.0, 0.0], [1.0, 1.0])
        np.testing.assert_array_equal(sol.powers, np.zeros((2, 4)))

    def test_single_user_water_level(self):
        h = np.array([[1.0, 0.5, 0.1, 2.0]])
        ch = ChannelSet.from_vectors(h, 0.1)
        sol = inner_weighted_max(ch, [1.0], [1.0])
        expected = np.maximum(0.0, 1.0 / np.log(2) - 0.1 / np.abs(h[0]) ** 2)
        np.testing.assert_allclose(sol.powers[0], expected, atol=1e-7)

    def test_two_users_match_grid(self):
        ch = ChannelSet.from_vectors(np.array([[2.0], [1.0]]), 1.0)
        theta = np.array([1.0, 2.0])
        sol = inner_weighted_max(ch, theta, [1.0, 1.0])

        grid = np.linspace(0.0, 6.0, 601)
        p0, p1 = np.meshgrid(grid, grid, indexing="ij")
        both = np.log2(1 + 4 * p0 + p1)
        alone = np.log2(1 + p1)
        objective = theta[0] * (both - alone) + theta[1] * alone - p0 - p1
        best = float(objective.max())

        order = derive_order(theta).canonical_order
        rates = sic_rates(ch, PowerAllocation(sol.powers), order).per_user()
        value = float(theta @ rates - sol.powers.sum())
        self.assertGreaterEqual(value, best - 1e-6)
        self.assertLessEqual(value, best + 0.01 * abs(best))
        self.assertAlmostEqual(sol.value, value, places=9)

    def test_rates_match_rate_engine(self):
        ch = _random_channel(1)
        theta = np.array([0.5, 2.0, 1.0])
        sol = inner_weighted_max(ch, theta, [1.0, 1.0, 1.0])
        expected = sic_rates(ch, PowerAllocation(sol.powers), sol.order).bits
        np.testing.assert_allclose(sol.rates, expected, atol=1e-10)
        self.assertEqual(sol.order.order, (0, 2, 1))
        self.assertLessEqual(sol.residual, 1e-8)

    def test_prices_must_be_positive(self):
        with self.assertRaises(DomainError):
            inner_weighted_max(_random_channel(2), [1.0, 1.0, 1.0], [1.0, 0.0, 1.0])

    def test_order_must_sort_theta(self):
        with self.assertRaises(DomainError):
            inner_weighted_max(_random_channel(2), [1.0, 2.0, 3.0], [1.0, 1.0, 1.0], order=DecodingOrder((2, 1, 0)))


class TestMinEnergy(unittest.TestCase):
    def test_single_user_closed_form(self):
        ch = ChannelSet.from_vectors(np.array([[1.0]]), 0.5)
        result = min_energy_allocate(ch, RateRequirement([3.0]))
        self.assertAlmostEqual(result.alloc.total(), 0.5 * (2**3 - 1), delta=1e-3 * 3.5)

    def test_zero_targets(self):
        result = min_energy_allocate(_random_channel(0), RateRequirement([0.0, 0.0, 0.0]))
        self.assertEqual(result.alloc.total(), 0.0)
        np.testing.assert_array_equal(result.cert.theta, [0.0, 0.0, 0.0])

    def test_meets_targets(self):
        ch = _random_channel(3)
        b_min = np.array([6.0, 4.0, 8.0])
        opt = SolverOptions()
        result = min_energy_allocate(ch, RateRequirement(b_min), opt)
        self.assertTrue(np.all(result.achieved_rates() >= b_min * (1 - opt.rate_tol) - 1e-9))
        # complementary slackness: every positive theta has an active constraint
        np.testing.assert_allclose(result.achieved_rates(), b_min, rtol=10 * opt.rate_tol)
        self.assertEqual(derive_order(result.cert).canonical_order, result.order)

    def test_reported_rates_come_from_rate_engine(self):
        ch = _random_channel(4)
        result = min_energy_allocate(ch, RateRequirement([5.0, 5.0, 5.0]))
        expected = sic_rates(ch, result.alloc, result.order).bits
        np.testing.assert_allclose(result.rates.bits, expected)
        self.assertLessEqual(polymatroid_violation(ch, result.alloc, result.order), 1e-9)

    def test_inactive_user(self):
        ch = _random_channel(5)
        result = min_energy_allocate(ch, RateRequirement([4.0, 0.0, 4.0]))
        self.assertEqual(result.alloc.per_user()[1], 0.0)
        self.assertEqual(result.cert.theta[1], 0.0)
        self.assertEqual(result.order.order[0], 1)

    def test_dead_channel_infeasible(self):
        h = np.array([[1.0, 1.0], [0.0, 0.0]])
        with self.assertRaises(Infeasible):
            min_energy_allocate(ChannelSet.from_vectors(h, 1.0), RateRequirement([1.0, 1.0]))

    def test_energy_cap(self):
        with self.assertRaises(Infeasible):
            min_energy_allocate(
                _random_channel(6), RateRequirement([6.0, 6.0, 6.0]), SolverOptions(energy_cap=1e-3)
            )

    def test_iteration_cap(self):
        with self.assertRaises(NotConverged) as ctx:
            min_energy_allocate(
                _random_channel(7), RateRequirement([8.0, 8.0, 8.0]), SolverOptions(max_outer_iters=1)
            )
        self.assertEqual(ctx.exception.iterations, 1)

    def test_weight_scaling(self):
        ch = _random_channel(8)
        b_min = [5.0, 6.0, 4.0]
        base = min_energy_allocate(ch, RateRequirement(b_min, [1.0, 2.0, 1.5]))
        scaled = min_energy_allocate(ch, RateRequirement(b_min, [3.0, 6.0, 4.5]))
        np.testing.assert_allclose(scaled.alloc.energy, base.alloc.energy, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(scaled.cert.theta, 3 * base.cert.theta, rtol=1e-6)

    def test_trace_best_value_non_decreasing(self):
        result = min_energy_allocate(
            _random_channel(9), RateRequirement([6.0, 6.0, 6.0]), SolverOptions(trace=True)
        )
        best = [row.best_value for row in result.trace]
        self.assertEqual(len(best), result.iterations)
        self.assertTrue(all(b <= a for b, a in zip(best, best[1:])))


def _marginal_rates(ch: ChannelSet, theta: np.ndarray, order: DecodingOrder, powers: np.ndarray) -> np.ndarray:
    """d/dp[u][n] of sum_u theta_u b_u, evaluated directly from the SIC log-dets."""
    h = ch.vectors() / np.sqrt(ch.noise_variance)
    perm = list(order.order)
    steps = np.diff(theta[perm], prepend=0.0)
    marginal = np.zeros_like(powers)
    for n in range(ch.num_subcarriers):
        for k in range(len(perm)):
            tail = perm[k:]
            a = np.eye(h.shape[2]) + sum(powers[j, n] * np.outer(h[j, n], h[j, n].conj()) for j in tail)
            for i in tail:
                quad = np.real(h[i, n].conj() @ np.linalg.solve(a, h[i, n]))
                marginal[i, n] += steps[k] * quad / np.log(2)
    return marginal


class TestStationarity(unittest.TestCase):
    def _assert_stationary(self, marginal, powers, prices, bound):
        on = powers > 0
        gap = np.abs(marginal - prices[:, None]) / prices[:, None]
        self.assertLessEqual(float(gap[on].max()), bound)
        ceiling = np.broadcast_to(prices[:, None], powers.shape) * (1 + bound)
        self.assertTrue(np.all(marginal[~on] <= ceiling[~on]))

    def test_inner_marginal_rate_equals_price(self):
        ch = _random_channel(11)
        theta = np.array([1.5, 0.7, 2.4])
        prices = np.array([1.0, 0.8, 1.3])
        tol = 1e-8
        sol = inner_weighted_max(ch, theta, prices, tol=tol)
        self.assertLessEqual(sol.residual, tol)
        marginal = _marginal_rates(ch, theta, sol.order, sol.powers)
        self._assert_stationary(marginal, sol.powers, prices, 10 * tol)

    def test_min_energy_marginal_rate_equals_weight(self):
        ch = _random_channel(12)
        opt = SolverOptions()
        req = RateRequirement([5.0, 7.0, 6.0], [1.0, 1.5, 0.8])
        result = min_energy_allocate(ch, req, opt)
        marginal = _marginal_rates(ch, result.cert.theta, result.order, result.alloc.energy)
        self._assert_stationary(marginal, result.alloc.energy, req.weights, 10 * opt.inner_tol + 1e-12)


def _identical_users(users: int, seed: int = 0, n_sub: int = 8, ap: int = 2) -> ChannelSet:
    rng = np.random.default_rng(seed)
    h = (rng.standard_normal((n_sub, ap)) + 1j * rng.standard_normal((n_sub, ap))) / np.sqrt(2)
    return ChannelSet.from_vectors(np.repeat(h[None], users, axis=0), 1.0)


class TestMinEnergyTies(unittest.TestCase):
    def test_identical_users_share_time(self):
        ch = _identical_users(3)
        b_min = np.array([6.0, 6.0, 6.0])
        opt = SolverOptions()
        result = min_energy_allocate(ch, RateRequirement(b_min), opt)
        self.assertLessEqual(np.ptp(result.cert.theta), opt.eps_theta * result.cert.theta.max())
        self.assertGreater(len(result.schedule), 1)
        np.testing.assert_allclose(result.achieved_rates(), b_min, rtol=1e-3)

    def test_identical_users_unequal_targets(self):
        ch = _identical_users(3, seed=1)
        b_min = np.array([4.0, 5.0, 6.0])
        result = min_energy_allocate(ch, RateRequirement(b_min))
        np.testing.assert_allclose(result.achieved_rates(), b_min, rtol=1e-3)
        for entry in result.schedule.entries:
            along = result.cert.theta[list(entry.order.order)]
            self.assertTrue(np.all(np.diff(along) >= -1e-6 * along.max()))

    def test_low_rank_equal_targets(self):
        for seed in (13, 14, 15):
            ch = _random_channel(seed, users=3, n_sub=8, ap=2)
            b_min = np.array([6.0, 6.0, 6.0])
            with self.subTest(seed=seed):
                result = min_energy_allocate(ch, RateRequirement(b_min))
                np.testing.assert_allclose(result.achieved_rates(), b_min, rtol=1e-3)
                self.assertLessEqual(polymatroid_violation(ch, result.alloc, result.order), 1e-9)


class TestMaxRate(unittest.TestCase):
    def test_single_user_water_filling(self):
        gains = np.array([1.0, 0.5, 0.25, 0.1])
        ch = ChannelSet.from_vectors(np.sqrt(gains)[None, :], 1.0)
        result = max_rate_allocate(ch, EnergyBudget([2.0]))
        np.testing.assert_allclose(result.alloc.energy[0], water_fill_budget(gains, 2.0), atol=1e-8)

    def test_zero_budget(self):
        result = max_rate_allocate(_random_channel(0), EnergyBudget([0.0, 0.0, 0.0]))
        self.assertEqual(result.alloc.total(), 0.0)
        self.assertEqual(result.rates.total(), 0.0)

    def test_budgets_respected(self):
        e_max = np.array([4.0, 2.0, 8.0])
        result = max_rate_allocate(_random_channel(1), EnergyBudget(e_max, [1.0, 2.0, 3.0]))
        self.assertTrue(np.all(result.alloc.per_user() <= e_max * (1 + 1e-6)))
        self.assertEqual(result.order.order, (0, 1, 2))

    def test_beats_flat_allocation(self):
        ch = _random_channel(2)
        e_max = np.array([4.0, 4.0, 4.0])
        result = max_rate_allocate(ch, EnergyBudget(e_max))
        flat = PowerAllocation(np.repeat((e_max / ch.num_subcarriers)[:, None], ch.num_subcarriers, axis=1))
        self.assertGreaterEqual(result.rates.total(), sic_rates(ch, flat, result.order).total() - 1e-9)

    def test_fixed_order_must_sort_weights(self):
        with self.assertRaises(DomainError):
            max_rate_allocate(
                _random_channel(3), EnergyBudget([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]), order=DecodingOrder((2, 1, 0))
            )

    def test_budget_prices_reported(self):
        result = max_rate_allocate(_random_channel(4), EnergyBudget([2.0, 3.0, 0.0]))
        self.assertIsNotNone(result.cert.lam)
        self.assertTrue(np.all(result.cert.lam[:2] > 0))
        self.assertEqual(result.cert.lam[2], 0.0)
        self.assertEqual(result.alloc.per_user()[2], 0.0)

    def test_duality_round_trip(self):
        ch = _random_channel(5)
        b_min = np.array([6.0, 5.0, 7.0])
        primal = min_energy_allocate(ch, RateRequirement(b_min))
        dual = max_rate_allocate(ch, EnergyBudget(primal.alloc.per_user(), primal.cert.theta))
        np.testing.assert_allclose(_recovered_rates(ch, primal, dual), b_min, rtol=1e-2)


if __name__ == "__main__":
    unittest.main()
