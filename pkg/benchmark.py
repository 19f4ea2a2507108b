#!/usr/bin/env python3
"""
Performance benchmark comparing the fast and reference paths of branchsim.

Each entry times a production code path against the reference it is checked
against in the tests: the reduced splitting rule against the literal
state-vector rule, the aggregated class table against the exact labelled
engine, and the streaming log-sum against scipy's batch logsumexp.

Usage:
    python3 benchmark.py

Interpreting Results:
    - µs (microseconds) = time per operation (lower is better)
    - Speedup > 1.0 means the fast path wins
    - Speedup < 1.0 means the reference path wins
"""

import math
import os
import sys
import time

import numpy as np
from scipy.special import logsumexp

# Run against the working tree
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

try:
    import branchsim
except ImportError as exc:
    print(f"Error: branchsim could not be imported ({exc}); install numpy, scipy and tqdm")
    sys.exit(1)

from branchsim.config import EngineMode, EngineSettings
from branchsim.engine import (AggregatedEngine, ClassTable, StateVectorToy, SubBranch,
                              apply_branch_vector, run_exact, run_hybrid, split_sub_branch)
from branchsim.measure import BigCount, ClassKey, branch_time, logsumexp_accumulate


class BenchmarkResult:
    """Store and format benchmark results."""

    def __init__(self, name, fast_time, reference_time, iterations):
        self.name = name
        self.fast_time = fast_time
        self.reference_time = reference_time
        self.iterations = iterations
        self.speedup = reference_time / fast_time if fast_time > 0 else 0

    def __str__(self):
        fast_us = self.fast_time * 1e6 / self.iterations
        reference_us = self.reference_time * 1e6 / self.iterations
        speedup_str = f"{self.speedup:.2f}x" if self.speedup >= 1 else f"{1/self.speedup:.2f}x slower"

        return (f"{self.name:40s} | "
                f"fast: {fast_us:10.2f} µs | "
                f"reference: {reference_us:10.2f} µs | "
                f"{speedup_str:15s}")


def benchmark(func, iterations=1000):
    """Benchmark a function by running it multiple times."""
    start = time.perf_counter()
    for _ in range(iterations):
        func()
    end = time.perf_counter()
    return end - start


def benchmark_branching_rule(iterations=2000):
    """Single branching event: reduced measure split against the literal vector form."""
    print("\n" + "="*80)
    print("Branching Rule (one event)")
    print("="*80)

    results = []
    sp = branchsim.make_split_parameter(0.5)

    for cells in (2, 8, 32):
        weights = np.full(cells, 1.0 / cells)
        g = float(cells)
        t = branch_time(math.log(weights[0]), g, 1.0)
        sub = SubBranch((), {c: math.log(w) for c, w in enumerate(weights)})
        state = StateVectorToy.from_cells({c: math.sqrt(w) for c, w in enumerate(weights)}, g)

        def reduced():
            split_sub_branch(sub, 0, t, sp)

        def literal():
            apply_branch_vector(state, 0, t, sp)

        results.append(BenchmarkResult(
            f"Split, {cells} cells",
            benchmark(reduced, iterations),
            benchmark(literal, iterations),
            iterations
        ))

    for result in results:
        print(result)

    return results


def benchmark_engines(iterations=5):
    """Whole runs: aggregated class counts against the exact labelled engine."""
    print("\n" + "="*80)
    print("Engines (equal-measure sequence)")
    print("="*80)

    results = []

    for doublings in (8, 12):
        scenario = branchsim.build_eq5(doublings)
        hybrid = scenario.with_overrides(mode=EngineMode.HYBRID,
                                         settings=EngineSettings(residual_handoff=2.0 ** -4))

        def aggregated():
            run_hybrid(hybrid)

        def exact():
            run_exact(scenario)

        results.append(BenchmarkResult(
            f"Eq5 run, {doublings} doublings",
            benchmark(aggregated, iterations),
            benchmark(exact, iterations),
            iterations
        ))

    sp = branchsim.golden_split()

    def golden_aggregated():
        table = ClassTable(sp, 1.0, 1.0, [0.0], [0])
        table.add(ClassKey(0, 0, 0), BigCount.of(1))
        AggregatedEngine(table).advance(60.0)

    def golden_log_domain():
        table = ClassTable(sp, 1.0, 1.0, [0.0], [0], count_bits=8)
        table.add(ClassKey(0, 0, 0), BigCount.of(1))
        table.to_log_domain()
        AggregatedEngine(table).advance(60.0)

    results.append(BenchmarkResult(
        "Golden split to 60 tau, int vs log",
        benchmark(golden_aggregated, iterations),
        benchmark(golden_log_domain, iterations),
        iterations
    ))

    for result in results:
        print(result)

    return results


def benchmark_log_sums(iterations=200):
    """Streaming log-sum against scipy's batch logsumexp."""
    print("\n" + "="*80)
    print("Log-space Sums")
    print("="*80)

    results = []
    rng = np.random.Generator(np.random.PCG64(1))

    for size in (100, 10000):
        terms = rng.uniform(-700.0, 0.0, size=size)
        as_list = list(terms)

        def streaming():
            logsumexp_accumulate(as_list)

        def batch():
            logsumexp(terms)

        results.append(BenchmarkResult(
            f"logsumexp, {size} terms",
            benchmark(streaming, iterations),
            benchmark(batch, iterations),
            iterations
        ))

    for result in results:
        print(result)

    return results


def print_summary(all_results):
    """Print summary statistics."""
    print("\n" + "="*80)
    print("Summary")
    print("="*80)

    fast_wins = sum(1 for r in all_results if r.speedup >= 1.0)
    reference_wins = len(all_results) - fast_wins

    avg_speedup = sum(r.speedup for r in all_results) / len(all_results)

    print(f"Total benchmarks:  {len(all_results)}")
    print(f"fast path faster:  {fast_wins} ({fast_wins/len(all_results)*100:.1f}%)")
    print(f"reference faster:  {reference_wins} ({reference_wins/len(all_results)*100:.1f}%)")
    print(f"Average speedup:   {avg_speedup:.2f}x")

    print("\nLargest gains:")
    sorted_results = sorted(all_results, key=lambda r: r.speedup, reverse=True)
    for result in sorted_results[:3]:
        print(f"  {result.name:40s} - {result.speedup:.2f}x faster")


def main():
    print("="*80)
    print(f"branchsim {branchsim.__version__} Performance Benchmark")
    print("="*80)
    print("\nLower time per operation is better.")
    print()

    all_results = []

    all_results.extend(benchmark_branching_rule(iterations=2000))
    all_results.extend(benchmark_engines(iterations=5))
    all_results.extend(benchmark_log_sums(iterations=200))

    print_summary(all_results)

    print("\n" + "="*80)
    print("Benchmark complete!")
    print("="*80)


if __name__ == "__main__":
    main()
