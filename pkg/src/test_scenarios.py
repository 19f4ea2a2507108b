import unittest
import sys
import os
import math

import numpy as np

# Add repository root to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
import branchsim
from branchsim.config import EngineMode, PhysicalParams, RateScaling
from branchsim.engine import outcome_counts, run_aggregated, run_exact
from branchsim.measure import BigCount, count_ratio, golden_split, make_split_parameter
from branchsim.record import REGIME_COLUMNS
from branchsim.scenarios import (FAMILY_A, FAMILY_B, branch_interval, build_eq5,
                                 build_gaussian_pair, build_golden, build_two_outcome,
                                 condition8_gaussian, doubling_time, energy_drift_rate,
                                 family_first_event_times, mass_threshold,
                                 multiparticle_stream, regime_report, spreading_delay,
                                 spreading_measure, spreading_time, tau_for_mass,
                                 time_averaged_ratio)


def approx_equal(a, b, rel_tol=1e-12):
    return abs(a - b) <= rel_tol * max(abs(a), abs(b), 1.0)


def family_ratio(table):
    counts = outcome_counts(table)
    return count_ratio(counts[FAMILY_A], counts[FAMILY_B])


def params_with_ratio(ratio):
    """GRW proton parameters with tau1 chosen so that tau1 / t0 == ratio."""
    t0 = spreading_time(PhysicalParams())
    return PhysicalParams(rate=1.0 / (ratio * t0))


class TestBuilders(unittest.TestCase):
    def test_eq5_layout(self):
        scenario = build_eq5(4)
        self.assertEqual(scenario.mode, EngineMode.EXACT)
        self.assertEqual(len(scenario.sample_times), 4)
        self.assertTrue(approx_equal(scenario.sample_times[0], 0.5 * doubling_time()))
        self.assertEqual(scenario.horizon, scenario.sample_times[-1])
        with self.assertRaises(branchsim.DomainError):
            build_eq5(0)

    def test_two_outcome_measures(self):
        with self.assertRaises(branchsim.DomainError):
            build_two_outcome(0.7, 0.4)

    def test_two_outcome_average(self):
        scenario = build_two_outcome(0.6, 0.4, doublings=6)
        ratios = [family_ratio(s) for s in run_exact(scenario)]
        self.assertEqual(sorted(set(ratios)), [1.0, 2.0])
        average = time_averaged_ratio(ratios, 4, 16)
        self.assertAlmostEqual(average, math.log2(3.0), delta=0.05)
        with self.assertRaises(branchsim.DomainError):
            time_averaged_ratio(ratios, 10, 16)

    def test_golden_components(self):
        scenario = build_golden(horizon=10.0, components=4)
        self.assertEqual(len(scenario.components), 4)
        self.assertTrue(approx_equal(scenario.total_measure, 1.0))
        self.assertEqual(scenario.settings.samples_per_decade, 64)
        with self.assertRaises(branchsim.DomainError):
            build_golden(components=0)


class TestGaussianPair(unittest.TestCase):
    def test_uniform_lead(self):
        scenario = build_gaussian_pair()
        first = family_first_event_times(scenario)
        self.assertAlmostEqual(first[FAMILY_B], 0.0, delta=1e-12)
        self.assertTrue(approx_equal(first[FAMILY_A] - first[FAMILY_B], 5.0 * doubling_time(),
                                     1e-9))
        self.assertEqual(sorted(c.cells[0].multiplicity for c in scenario.components),
                         [100 ** 3, 400 ** 3])

    def test_uniform_ratio(self):
        result = run_aggregated(build_gaussian_pair())
        self.assertAlmostEqual(family_ratio(result.final), 2.0, delta=0.02)
        self.assertTrue(approx_equal(result.final.total_measure(), 1.0, 1e-9))

    def test_gaussian_ratio(self):
        scenario = build_gaussian_pair(weights="gaussian")
        self.assertTrue(approx_equal(scenario.total_measure, 1.0, 1e-9))
        result = run_aggregated(scenario)
        self.assertAlmostEqual(family_ratio(result.final), 2.0, delta=0.02)

    def test_gaussian_ratio_irrational_split(self):
        scenario = build_gaussian_pair(weights="gaussian", sp=golden_split())
        result = run_aggregated(scenario)
        self.assertAlmostEqual(family_ratio(result.final), 2.0, delta=0.02)

    def test_smaller_cells(self):
        scenario = build_gaussian_pair(width_a=40.0, width_b=10.0)
        result = run_aggregated(scenario)
        self.assertAlmostEqual(family_ratio(result.final), 2.0, delta=0.02)

    def test_invalid(self):
        with self.assertRaises(branchsim.DomainError):
            build_gaussian_pair(weights="flat")
        with self.assertRaises(branchsim.DomainError):
            build_gaussian_pair(width_b=0.1)


class TestRegimeNumbers(unittest.TestCase):
    def test_proton(self):
        delay = spreading_delay(PhysicalParams())
        self.assertTrue(1.0e-7 <= delay.t0 <= 2.5e-7)
        self.assertTrue(140.0 <= delay.delay_factor <= 170.0)
        self.assertTrue(delay.rebranches)
        self.assertTrue(delay.delay_factor < delay.root_ratio < 1.2 * delay.delay_factor)
        # the quoted 10**70 is an order-of-magnitude figure
        self.assertTrue(1e68 <= delay.cells_covered <= 1e72)

    def test_root(self):
        p = PhysicalParams()
        delay = spreading_delay(p)
        self.assertAlmostEqual(spreading_measure(delay.next_branch_time, p), 1.0, delta=1e-10)

    def test_asymptote(self):
        for ratio in (1e16, 1e20, 1e24):
            delay = spreading_delay(params_with_ratio(ratio))
            error = abs(delay.root_ratio - delay.delay_factor) / delay.root_ratio
            self.assertLess(error, 0.15)

    def test_no_rebranch(self):
        delay = spreading_delay(PhysicalParams(), horizon_factor=10.0)
        self.assertFalse(delay.rebranches)
        self.assertIsNone(delay.root_ratio)

    def test_small_ratio_warns(self):
        with self.assertLogs("branchsim.scenarios", level="WARNING"):
            spreading_delay(params_with_ratio(100.0))

    def test_thresholds(self):
        independent = PhysicalParams()
        proportional = PhysicalParams(rate_scaling=RateScaling.PROPORTIONAL_TO_MASS)
        self.assertTrue(0.5e-4 <= mass_threshold(independent) <= 2e-4)
        self.assertTrue(1e-16 <= mass_threshold(proportional) <= 1e-14)
        self.assertLess(branch_interval(proportional, 1e-4), 1e-6)
        self.assertEqual(tau_for_mass(independent, 1e-4), independent.tau1)
        with self.assertRaises(branchsim.DomainError):
            tau_for_mass(independent, 0.0)

    def test_condition8(self):
        self.assertTrue(approx_equal(condition8_gaussian(1.0, 10.0), 0.03))
        with self.assertRaises(branchsim.DomainError):
            condition8_gaussian(0.0, 1.0)

    def test_report(self):
        report = regime_report(PhysicalParams())
        self.assertEqual(tuple(report), REGIME_COLUMNS)
        self.assertEqual(report["mass_kg"], PhysicalParams().mass)


class TestMultiParticle(unittest.TestCase):
    def test_rate_scaling(self):
        sp = make_split_parameter(0.5)
        for n in (10, 100, 1000):
            single = doubling_time()
            stream = multiparticle_stream(n, sp, 1.0, seed=3, horizon=1e4 * single / n)
            self.assertGreaterEqual(len(stream.times), 1e4 * 0.9)
            self.assertTrue(approx_equal(stream.single_interval, single))
            relative = abs(stream.mean_interval - stream.expected_interval) / stream.expected_interval
            self.assertLess(relative, 0.05)

    def test_unequal_split(self):
        sp = golden_split()
        single = -0.5 * (sp.log_z + sp.log_one_minus_z)
        stream = multiparticle_stream(100, sp, 1.0, seed=5, horizon=1e4 * single / 100)
        relative = abs(stream.mean_interval - stream.expected_interval) / stream.expected_interval
        self.assertLess(relative, 0.05)
        self.assertTrue(np.all(np.diff(stream.times) >= 0.0))

    def test_seeded(self):
        sp = golden_split()
        first = multiparticle_stream(20, sp, 1.0, seed=42, horizon=50.0)
        second = multiparticle_stream(20, sp, 1.0, seed=42, horizon=50.0)
        other = multiparticle_stream(20, sp, 1.0, seed=43, horizon=50.0)
        self.assertTrue(np.array_equal(first.times, second.times))
        self.assertTrue(np.array_equal(first.particles, second.particles))
        self.assertFalse(np.array_equal(first.times[:10], other.times[:10]))

    def test_invalid(self):
        sp = make_split_parameter(0.5)
        with self.assertRaises(branchsim.DomainError):
            multiparticle_stream(0, sp, 1.0, 1, 10.0)
        with self.assertRaises(branchsim.DomainError):
            multiparticle_stream(5, sp, 1.0, 1, -1.0)


class TestEnergyDrift(unittest.TestCase):
    def test_equal_counts(self):
        rate = energy_drift_rate(1e-45, [0.0, 2.0], hbar=1.0)
        self.assertTrue(approx_equal(rate, 1e-45))

    def test_weighted(self):
        rate = energy_drift_rate(1.0, [0.0, 2.0], [1, 3], hbar=1.0)
        self.assertTrue(approx_equal(rate, 0.75))
        big = energy_drift_rate(1.0, [0.0, 2.0], [BigCount.of(1), BigCount.from_log(math.log(3.0))],
                                hbar=1.0)
        self.assertTrue(approx_equal(big, 0.75))

    def test_invalid(self):
        with self.assertRaises(branchsim.DomainError):
            energy_drift_rate(0.0, [1.0])
        with self.assertRaises(branchsim.DomainError):
            energy_drift_rate(1.0, [])


if __name__ == "__main__":
    unittest.main(verbosity=2)
