#!/usr/bin/env python3
"""
Unit tests for the SIC rate engine.

Run with: pytest tests/test_rate.py -v
"""

import itertools
import unittest

import numpy as np

from sicmac.channel import ChannelSet
from sicmac.errors import DomainError
from sicmac.rate import (
    DecodingOrder,
    PowerAllocation,
    RateMatrix,
    bits_to_mbps,
    log_det,
    mbps_to_bits,
    polymatroid_violation,
    sic_rates,
    subset_capacity,
    throughput_mbps,
)


def _random_case(seed: int, users: int = 3, n_sub: int = 6, ap: int = 2) -> tuple[ChannelSet, PowerAllocation]:
    rng = np.random.default_rng(seed)
    h = (rng.standard_normal((users, n_sub, ap)) + 1j * rng.standard_normal((users, n_sub, ap))) / np.sqrt(2)
    ch = ChannelSet.from_vectors(h, 0.5)
    return ch, PowerAllocation(rng.exponential(2.0, size=(users, n_sub)))


class TestDecodingOrder(unittest.TestCase):
    def test_parse_and_label(self):
        order = DecodingOrder.parse("3-2-1")
        self.assertEqual(order.order, (2, 1, 0))
        self.assertEqual(order.label(), "3-2-1")
        self.assertEqual(str(order), "3-2-1")

    def test_positions_invert(self):
        order = DecodingOrder((2, 0, 1))
        np.testing.assert_array_equal(order.positions(), [1, 2, 0])

    def test_rejects_non_permutation(self):
        with self.assertRaises(DomainError):
            DecodingOrder((0, 0, 1))
        with self.assertRaises(DomainError):
            DecodingOrder.parse("1-x")


class TestContainers(unittest.TestCase):
    def test_negative_energy_rejected(self):
        with self.assertRaises(DomainError):
            PowerAllocation(np.array([[1.0, -0.1]]))

    def test_read_only(self):
        alloc = PowerAllocation(np.ones((2, 3)))
        with self.assertRaises(ValueError):
            alloc.energy[0, 0] = 5.0

    def test_totals(self):
        rates = RateMatrix(np.array([[1.0, 2.0], [0.5, 0.5]]))
        np.testing.assert_allclose(rates.per_user(), [3.0, 1.0])
        self.assertEqual(rates.total(), 4.0)


class TestLogDet(unittest.TestCase):
    def test_matches_slogdet(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 3, 3)) + 1j * rng.standard_normal((5, 3, 3))
        hermitian = np.eye(3) + a @ np.conj(np.transpose(a, (0, 2, 1)))
        np.testing.assert_allclose(log_det(hermitian), np.linalg.slogdet(hermitian)[1], rtol=1e-12)


class TestSicRates(unittest.TestCase):
    def test_two_user_scalar_closed_form(self):
        ch = ChannelSet.from_vectors(np.array([[2.0], [1.0]]), 1.0)
        alloc = PowerAllocation(np.array([[1.0], [3.0]]))
        rates = sic_rates(ch, alloc, DecodingOrder((0, 1))).bits[:, 0]
        # user 1 is decoded first against user 2's interference
        self.assertAlmostEqual(rates[0], np.log2(1 + 4 + 3) - np.log2(1 + 3), places=12)
        self.assertAlmostEqual(rates[1], np.log2(1 + 3), places=12)

    def test_zero_allocation_gives_zero_rates(self):
        ch, _ = _random_case(1)
        rates = sic_rates(ch, PowerAllocation.zeros(3, 6), DecodingOrder.identity(3))
        self.assertEqual(rates.total(), 0.0)

    def test_telescoping(self):
        ch, alloc = _random_case(2)
        total = sic_rates(ch, alloc, DecodingOrder((1, 2, 0))).total()
        self.assertAlmostEqual(total, subset_capacity(ch, alloc, [0, 1, 2]), places=9)

    def test_sum_independent_of_order(self):
        ch, alloc = _random_case(3)
        totals = [sic_rates(ch, alloc, DecodingOrder(p)).total() for p in itertools.permutations(range(3))]
        self.assertLess(max(totals) - min(totals), 1e-9)

    def test_last_decoded_sees_no_interference(self):
        ch, alloc = _random_case(4)
        rates = sic_rates(ch, alloc, DecodingOrder((0, 2, 1))).per_user()
        self.assertAlmostEqual(rates[1], subset_capacity(ch, alloc, [1]), places=9)

    def test_order_length_checked(self):
        ch, alloc = _random_case(5)
        with self.assertRaises(DomainError):
            sic_rates(ch, alloc, DecodingOrder((0, 1)))

    def test_shape_checked(self):
        ch, _ = _random_case(5)
        with self.assertRaises(DomainError):
            sic_rates(ch, PowerAllocation(np.ones((3, 2))), DecodingOrder.identity(3))

    def test_polymatroid_holds(self):
        for seed in range(5):
            ch, alloc = _random_case(seed)
            for perm in itertools.permutations(range(3)):
                self.assertLessEqual(polymatroid_violation(ch, alloc, DecodingOrder(perm)), 1e-9)

    def test_subset_capacity_rejects_empty(self):
        ch, alloc = _random_case(6)
        with self.assertRaises(DomainError):
            subset_capacity(ch, alloc, [])


class TestUnits(unittest.TestCase):
    def test_throughput(self):
        bits = np.array([[1.0] * 64, [0.5] * 64])
        np.testing.assert_allclose(throughput_mbps(bits, 80e6, 64), [80.0, 40.0])

    def test_bits_mbps_inverse(self):
        self.assertAlmostEqual(float(mbps_to_bits(bits_to_mbps(48.0, 80e6, 64), 80e6, 64)), 48.0)


if __name__ == "__main__":
    unittest.main()
