#!/usr/bin/env python3
"""
Unit tests for the experiment harness.

Run with: pytest tests/test_harness.py -v
"""

import unittest
from pathlib import Path

import numpy as np

from sicmac.channel import ScenarioConfig, generate_channels
from sicmac.errors import DomainError
from sicmac.harness import (
    COLUMNS,
    ExperimentSpec,
    ResultsTable,
    dbm_to_watts,
    dump_allocations,
    emit_csv,
    read_results_csv,
    reference_schedule,
    run_experiment,
    watts_to_dbm,
    write_trace_csv,
)
from sicmac.rate import DecodingOrder, PowerAllocation, bits_to_mbps, sic_rates
from sicmac.solver import SolverOptions

SMALL = ScenarioConfig(num_users=2, ap_antennas=2, num_subcarriers=8, distances_m=(3.0, 6.0))


class TestUnits(unittest.TestCase):
    def test_dbm(self):
        self.assertAlmostEqual(dbm_to_watts(30.0), 1.0)
        self.assertAlmostEqual(dbm_to_watts(15.0), 10**-1.5)
        self.assertAlmostEqual(watts_to_dbm(1e-3), 0.0)
        np.testing.assert_allclose(watts_to_dbm(np.array([1.0, 10.0])), [30.0, 40.0])


class TestExperimentSpec(unittest.TestCase):
    def test_unknown_mode(self):
        with self.assertRaises(DomainError):
            ExperimentSpec(mode="fastest")

    def test_methods_depend_on_mode(self):
        with self.assertRaises(DomainError):
            ExperimentSpec(mode="min_energy", methods=("proposed", "noma"))
        ExperimentSpec(mode="min_energy", methods=("proposed", "oma"))

    def test_snr_sweep_only_for_max_rate(self):
        with self.assertRaises(DomainError):
            ExperimentSpec(mode="min_energy", methods=("oma",), sweep_variable="snr", sweep_values=(0.0,))

    def test_sweep_needs_values(self):
        with self.assertRaises(DomainError):
            ExperimentSpec(sweep_variable="ap_antennas")

    def test_trials_positive(self):
        with self.assertRaises(DomainError):
            ExperimentSpec(trials=0)

    def test_points(self):
        self.assertEqual(ExperimentSpec().points(), [None])
        self.assertEqual(ExperimentSpec(sweep_variable="snr", sweep_values=(0.0, 10.0)).points(), [0.0, 10.0])


class TestRunExperiment(unittest.TestCase):
    def test_max_rate_rows_in_cell_order(self):
        spec = ExperimentSpec(scenario=SMALL, snr_db=0.0, trials=2)
        table = run_experiment(spec)
        self.assertEqual([(r.seed, r.method) for r in table.rows], [(s, m) for s in (0, 1) for m in spec.methods])
        self.assertEqual(table.failed(), [])
        for row in table.rows:
            self.assertEqual(len(row.rates_mbps), 2)
            self.assertAlmostEqual(row.sum_rate_mbps, sum(row.rates_mbps), places=9)
            self.assertAlmostEqual(row.spectral_efficiency, row.sum_rate_mbps / 80.0, places=9)

    def test_parallel_matches_serial(self):
        spec = ExperimentSpec(scenario=SMALL, snr_db=5.0, trials=3, methods=("proposed", "oma"))
        serial = run_experiment(spec, jobs=1).to_frame()
        parallel = run_experiment(spec, jobs=3).to_frame()
        self.assertTrue(serial.equals(parallel))

    def test_jobs_positive(self):
        with self.assertRaises(DomainError):
            run_experiment(ExperimentSpec(scenario=SMALL), jobs=0)

    def test_snr_sweep_monotone(self):
        spec = ExperimentSpec(scenario=SMALL, sweep_variable="snr", sweep_values=(-10.0, 0.0, 10.0), trials=2)
        frame = run_experiment(spec).to_frame()
        for (_method, _seed), group in frame.groupby(["method", "seed"]):
            rates = group.sort_values("sweep_value")["sum_rate_mbps"].to_numpy()
            self.assertTrue(np.all(np.diff(rates) > 0))

    def test_antenna_sweep(self):
        spec = ExperimentSpec(
            scenario=SMALL, snr_db=0.0, methods=("oma",), sweep_variable="ap_antennas", sweep_values=(1.0, 2.0, 4.0)
        )
        table = run_experiment(spec)
        self.assertEqual([r.sweep_value for r in table.rows], [1.0, 2.0, 4.0])
        self.assertEqual(table.failed(), [])

    def test_min_energy_meets_targets(self):
        spec = ExperimentSpec(scenario=SMALL, mode="min_energy", methods=("proposed", "oma"), target_mbps=100.0)
        table = run_experiment(spec)
        for row in table.rows:
            self.assertEqual(row.status, "ok")
            self.assertTrue(np.all(np.array(row.rates_mbps) >= 100.0 * (1 - 1e-3)))

    def test_power_parity_saves_power(self):
        spec = ExperimentSpec(scenario=SMALL, mode="power_parity", methods=("oma", "proposed"))
        oma, proposed = run_experiment(spec).rows
        self.assertLess(proposed.total_power_dbm, oma.total_power_dbm)
        np.testing.assert_allclose(proposed.rates_mbps, oma.rates_mbps, rtol=1e-3)
        self.assertAlmostEqual(oma.power_vs_ref_ratio, 1.0, places=9)
        self.assertAlmostEqual(oma.power_vs_ref_db, 0.0, places=9)

    def test_low_rank_equal_distances_all_rows_ok(self):
        scenario = ScenarioConfig(num_users=3, ap_antennas=2, distances_m=(3.0, 3.0, 3.0))
        for mode, methods in (("min_energy", ("proposed", "oma")), ("power_parity", ("oma", "proposed"))):
            with self.subTest(mode=mode):
                table = run_experiment(ExperimentSpec(scenario=scenario, mode=mode, methods=methods, trials=4))
                self.assertEqual(table.failed(), [])
                self.assertTrue(all(row.status == "ok" for row in table.rows))

    def test_min_energy_antenna_sweep_all_rows_ok(self):
        spec = ExperimentSpec(
            scenario=ScenarioConfig(num_users=3, distances_m=(3.0, 4.0, 5.0)),
            mode="min_energy",
            methods=("proposed", "oma"),
            target_mbps=200.0,
            sweep_variable="ap_antennas",
            sweep_values=(1.0, 2.0, 4.0),
        )
        table = run_experiment(spec)
        self.assertEqual(len(table.rows), 6)
        self.assertEqual(table.failed(), [])
        for row in table.rows:
            self.assertTrue(np.all(np.array(row.rates_mbps) >= 200.0 * (1 - 1e-3)))

    def test_failed_rows_recorded(self):
        spec = ExperimentSpec(scenario=SMALL, mode="min_energy", methods=("proposed",), target_mbps=(100.0,))
        table = run_experiment(spec)
        self.assertEqual(len(table.failed()), 1)
        self.assertIn("DomainError", table.rows[0].error)

    def test_trace_collected(self):
        spec = ExperimentSpec(
            scenario=SMALL, mode="min_energy", methods=("proposed",), solver=SolverOptions(trace=True)
        )
        table = run_experiment(spec)
        self.assertGreater(len(table.traces), 0)
        self.assertEqual(table.traces[0]["method"], "proposed")

    def test_summary(self):
        spec = ExperimentSpec(scenario=SMALL, snr_db=0.0, trials=2, methods=("proposed", "oma"))
        summary = run_experiment(spec).summary()
        self.assertEqual(list(summary["method"]), ["proposed", "oma"])


class TestReferenceSchedule(unittest.TestCase):
    def test_weights(self):
        schedule = reference_schedule()
        np.testing.assert_allclose(schedule.weights(), [0.52, 0.17, 0.31], atol=0.01)


def test_empty_table_writes_header_only(tmp_path: Path) -> None:
    path = emit_csv(ResultsTable(), tmp_path / "empty.csv")
    assert path.read_text(encoding="utf-8").splitlines() == [",".join(COLUMNS)]


def test_csv_round_trip(tmp_path: Path) -> None:
    table = run_experiment(ExperimentSpec(scenario=SMALL, snr_db=0.0, methods=("oma", "noma")))
    path = emit_csv(table, tmp_path / "results.csv")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# mode: max_rate")
    assert any(line.startswith("# snr_normalization") for line in lines)

    frame = read_results_csv(path)
    assert list(frame.columns) == COLUMNS
    assert list(frame["method"]) == ["oma", "noma"]
    for row, rates in zip(table.rows, frame["rates_mbps"], strict=True):
        np.testing.assert_allclose(rates, row.rates_mbps, rtol=1e-5)


def test_allocation_dump_recomputes_rates(tmp_path: Path) -> None:
    spec = ExperimentSpec(scenario=SMALL, snr_db=0.0, methods=("oma", "noma", "mc_noma"))
    table = run_experiment(spec)
    path = dump_allocations(table, tmp_path / "results.csv.alloc.npz")
    ch = generate_channels(SMALL.replace(seed=0))
    with np.load(path) as data:
        oma = data["oma|None|0|energy"]
        rates = sic_rates(ch, PowerAllocation(oma), DecodingOrder.identity(2)).per_user()
        np.testing.assert_allclose(bits_to_mbps(rates, 80e6, 8), table.rows[0].rates_mbps, rtol=1e-9)
        assert list(data["mc_noma|None|0|orders"]) == [table.rows[2].schedule.split(":")[0]]
        np.testing.assert_allclose(data["mc_noma|None|0|weights"], [1.0])


def test_trace_csv(tmp_path: Path) -> None:
    spec = ExperimentSpec(scenario=SMALL, mode="min_energy", methods=("proposed",), solver=SolverOptions(trace=True))
    path = write_trace_csv(run_experiment(spec), tmp_path / "trace.csv")
    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header == "method,sweep_value,seed,iteration,value,best_value,max_residual"
