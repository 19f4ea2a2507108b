import unittest
import sys
import os
import math
from fractions import Fraction

import numpy as np

# Add repository root to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))
import branchsim
from branchsim.measure import (GOLDEN_RATIO, LOG_ZERO, BigCount, ClassKey, binomial_log,
                               branch_time, class_measure, class_time, count_ratio,
                               golden_split, iter_keys_below, log_add, log_measure,
                               logsumexp_accumulate, make_split_parameter, split_pair)

RATIO_TWO_Z = (3.0 - math.sqrt(5.0)) / 2.0


def approx_equal(a, b, rel_tol=1e-12):
    return abs(a - b) <= rel_tol * max(abs(a), abs(b), 1.0)


class TestSplitParameter(unittest.TestCase):
    def test_half(self):
        sp = make_split_parameter(0.5)
        self.assertEqual(sp.log_z, sp.log_one_minus_z)
        self.assertEqual(sp.ratio, 1.0)
        self.assertEqual(sp.ratio_class, Fraction(1, 1))
        self.assertEqual(sp.lattice_steps, 1)
        self.assertEqual(sp.ratio_label, "rational(1,1)")

    def test_ratio_two(self):
        sp = make_split_parameter(RATIO_TWO_Z)
        self.assertEqual(sp.ratio_class, Fraction(2, 1))
        self.assertEqual(sp.lattice_steps, 2)
        self.assertTrue(approx_equal(sp.z_prime, RATIO_TWO_Z))

    def test_ratio_inverted(self):
        sp = make_split_parameter(1.0 - RATIO_TWO_Z)
        self.assertEqual(sp.ratio_class, Fraction(1, 2))
        self.assertEqual(sp.lattice_steps, 2)
        self.assertTrue(approx_equal(sp.z_prime, RATIO_TWO_Z))
        self.assertEqual(sp.log_z_prime, sp.log_one_minus_z)

    def test_rounded_value_is_irrational(self):
        sp = make_split_parameter(0.382)
        self.assertFalse(sp.is_rational)
        with self.assertRaises(branchsim.DomainError):
            sp.lattice_steps

    def test_derived_signs(self):
        for z in (1e-6, 0.1, 0.5, 0.9, 1.0 - 1e-6):
            sp = make_split_parameter(z)
            self.assertLess(sp.log_z, 0.0)
            self.assertLess(sp.log_one_minus_z, 0.0)
            self.assertGreater(sp.ratio, 0.0)

    def test_out_of_range(self):
        for z in (0.0, 1.0, -0.25, 1.5, float("nan")):
            with self.assertRaises(branchsim.DomainError):
                make_split_parameter(z)

    def test_bad_tolerance(self):
        with self.assertRaises(branchsim.DomainError):
            make_split_parameter(0.5, ratio_tolerance=0.0)

    def test_describe(self):
        text = make_split_parameter(0.5).describe()
        self.assertIn("rational(1,1)", text)


class TestGoldenSplit(unittest.TestCase):
    def test_defining_equation(self):
        sp = golden_split()
        self.assertTrue(approx_equal(sp.log_z, GOLDEN_RATIO * sp.log_one_minus_z))
        self.assertTrue(approx_equal(sp.ratio, GOLDEN_RATIO))
        self.assertTrue(0.41 < sp.z < 0.42)

    def test_irrational_at_any_tolerance(self):
        for tolerance in (1e-9, 1e-10, 1e-12):
            self.assertFalse(golden_split(tolerance).is_rational)
            self.assertEqual(golden_split(tolerance).ratio_label, "irrational")


class TestBranchTime(unittest.TestCase):
    def test_first_event_at_zero(self):
        self.assertEqual(branch_time(math.log(0.5), 2.0, 1.0), 0.0)

    def test_growth(self):
        t = branch_time(math.log(0.25), 1.0, 2.0)
        self.assertTrue(approx_equal(t, 2.0 * math.log(4.0)))
        self.assertTrue(approx_equal(0.25 * math.exp(t / 2.0), 1.0))

    def test_past_threshold(self):
        with self.assertRaises(branchsim.PreconditionError):
            branch_time(math.log(0.9), 2.0, 1.0)

    def test_rounding_slack(self):
        self.assertEqual(branch_time(1e-14, 1.0, 1.0), 0.0)

    def test_rounding_below_threshold(self):
        # ln(2/3) + ln(1.5) rounds to a tiny negative number
        self.assertEqual(branch_time(math.log(2.0 / 3.0), 1.5, 1.0), 0.0)
        self.assertEqual(branch_time(math.log(1.0 / 3.0), 3.0, 1.0), 0.0)

    def test_bad_arguments(self):
        with self.assertRaises(branchsim.DomainError):
            branch_time(-1.0, 0.0, 1.0)
        with self.assertRaises(branchsim.DomainError):
            branch_time(-1.0, 1.0, -1.0)

    def test_class_time(self):
        sp = make_split_parameter(0.5)
        key = ClassKey(0, 2, 1)
        self.assertEqual(class_measure(key, 0.0, sp), 3.0 * math.log(0.5))
        self.assertTrue(approx_equal(class_time(key, 0.0, 1.0, sp, 1.0), 3.0 * math.log(2.0)))

    def test_log_measure(self):
        self.assertEqual(log_measure(1.0), 0.0)
        with self.assertRaises(branchsim.DomainError):
            log_measure(0.0)


class TestLogSums(unittest.TestCase):
    def test_log_add(self):
        self.assertEqual(log_add(LOG_ZERO, -3.0), -3.0)
        self.assertEqual(log_add(-3.0, LOG_ZERO), -3.0)
        self.assertTrue(approx_equal(log_add(0.0, 0.0), math.log(2.0)))
        self.assertTrue(approx_equal(log_add(1000.0, 1000.0), 1000.0 + math.log(2.0)))

    def test_empty(self):
        self.assertEqual(logsumexp_accumulate([]), LOG_ZERO)
        self.assertEqual(logsumexp_accumulate([LOG_ZERO, LOG_ZERO]), LOG_ZERO)

    def test_large_terms(self):
        self.assertTrue(approx_equal(logsumexp_accumulate([800.0, 800.0, 800.0]),
                                     800.0 + math.log(3.0)))

    def test_permutation_invariance(self):
        rng = np.random.Generator(np.random.PCG64(7))
        terms = list(rng.uniform(-700.0, 700.0, size=2000))
        forward = logsumexp_accumulate(terms)
        backward = logsumexp_accumulate(reversed(terms))
        shuffled = logsumexp_accumulate(rng.permutation(terms))
        self.assertTrue(approx_equal(forward, backward))
        self.assertTrue(approx_equal(forward, shuffled))

    def test_many_equal_terms(self):
        value = logsumexp_accumulate([-5.0] * 100000)
        self.assertTrue(approx_equal(value, -5.0 + math.log(100000.0)))


class TestBigCount(unittest.TestCase):
    def test_exact(self):
        count = BigCount.of(2 ** 20 - 1)
        self.assertTrue(count.is_exact)
        self.assertEqual(count, 2 ** 20 - 1)
        self.assertEqual(count.to_json(), str(2 ** 20 - 1))

    def test_overflow_to_log(self):
        count = BigCount.of(2 ** 300, bit_budget=256)
        self.assertFalse(count.is_exact)
        self.assertTrue(approx_equal(count.log(), 300.0 * math.log(2.0)))
        self.assertEqual(count.to_json(), {"log": count.log()})

    def test_add(self):
        total = BigCount.of(3).add(BigCount.of(4))
        self.assertEqual(total, 7)
        total = BigCount.of(2 ** 255).add(BigCount.of(2 ** 255), bit_budget=256)
        self.assertFalse(total.is_exact)
        self.assertTrue(approx_equal(total.log(), 256.0 * math.log(2.0)))
        mixed = BigCount.of(1) + BigCount.from_log(0.0)
        self.assertTrue(approx_equal(mixed.log(), math.log(2.0)))

    def test_modes_agree(self):
        exact = BigCount.of(123456789)
        self.assertTrue(exact.isclose(exact.to_log_domain()))
        self.assertTrue(approx_equal(exact.to_log_domain().to_float(), 123456789.0))

    def test_zero(self):
        self.assertEqual(BigCount.of(0).log(), LOG_ZERO)

    def test_invalid(self):
        with self.assertRaises(branchsim.DomainError):
            BigCount(exact=-1)
        with self.assertRaises(branchsim.DomainError):
            BigCount()
        with self.assertRaises(branchsim.DomainError):
            BigCount(exact=1, log=0.0)

    def test_scaled(self):
        self.assertEqual(BigCount.of(5).scaled(3), 15)
        self.assertTrue(approx_equal(BigCount.from_log(1.0).scaled(2).log(), 1.0 + math.log(2.0)))

    def test_ratio(self):
        self.assertEqual(count_ratio(BigCount.of(2 ** 21 - 1), BigCount.of(2 ** 20 - 1)),
                         (2 ** 21 - 1) / (2 ** 20 - 1))
        self.assertEqual(count_ratio(BigCount.of(1), BigCount.of(0)), math.inf)
        self.assertTrue(approx_equal(count_ratio(BigCount.from_log(math.log(6.0)), BigCount.of(3)),
                                     2.0))


class TestKeys(unittest.TestCase):
    def test_binomial_log(self):
        self.assertTrue(approx_equal(binomial_log(10, 3), math.log(120.0)))
        self.assertEqual(binomial_log(3, 4), LOG_ZERO)
        self.assertTrue(approx_equal(binomial_log(2000, 1000), math.log(math.comb(2000, 1000))))

    def test_keys_below(self):
        sp = make_split_parameter(0.5)
        keys = list(iter_keys_below(0, sp, 2.0 * math.log(2.0) + 1e-9))
        self.assertEqual(len(keys), 6)
        self.assertTrue(all(k.a + k.b <= 2 for k in keys))

    def test_split_pair(self):
        self.assertEqual(split_pair(ClassKey(3, 1, 2)), (ClassKey(3, 2, 2), ClassKey(3, 1, 3)))


if __name__ == "__main__":
    unittest.main(verbosity=2)
