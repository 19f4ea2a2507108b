#!/usr/bin/env python3
"""
Example script demonstrating branchsim.

Walks through the worked two-outcome sequences, a short golden-ratio run and
the closed-form regime numbers for a GRW-style proton.
"""

import math

import branchsim
from branchsim.engine import outcome_counts, run_aggregated, run_exact
from branchsim.stats import (density_distance, density_histogram, envelope_summary,
                             log_deviation_series, mean_sub_branch_measure)


def main():
    print("=== branchsim Demo ===\n")

    # Equal measures: both outcomes branch together
    print("1. Equal-measure sequence")
    print("-" * 40)
    for j, snapshot in enumerate(run_exact(branchsim.build_eq5(6)), start=1):
        pure = snapshot.pure_counts()
        print(f"round {j}: A={pure[0]:4d}  B={pure[1]:4d}  residual={snapshot.residual_count}")

    # 2:1 measures: A starts one doubling time earlier
    print("\n2. Two-to-one sequence")
    print("-" * 40)
    final = run_exact(branchsim.build_eq6(10))[-1]
    counts = outcome_counts(final)
    print(f"pure counts {final.pure_counts()}")
    print(f"A:B with the residual split = {counts[0].exact}:{counts[1].exact}")

    # Split parameter
    print("\n3. Split parameters")
    print("-" * 40)
    for sp in (branchsim.make_split_parameter(0.5),
               branchsim.make_split_parameter((3.0 - math.sqrt(5.0)) / 2.0),
               branchsim.golden_split()):
        print(f"  {sp.describe()}")
        print(f"    limiting mean = {branchsim.limiting_mean(sp):.6f}")

    # Golden-ratio aggregated run
    print("\n4. Golden-ratio run to 300 tau")
    print("-" * 40)
    result = run_aggregated(branchsim.build_golden(horizon=300.0))
    series = result.series
    sp = branchsim.golden_split()
    print(f"events: {result.events}, alive classes: {len(result.final)}")
    print(f"final <M>_C = {series.mean[-1]:.6f} (limit {series.limiting:.6f})")
    print(f"final <ln M>_C deviation = {log_deviation_series(series)[-1]:.6f}")
    print(f"mean plain sub-branch measure = {mean_sub_branch_measure(result.final):.3e}")
    for name, value in envelope_summary(series, sp).items():
        print(f"  envelope {name}: {value}")
    hist = density_histogram(result.final, result.horizon)
    print(f"  distance to the stationary density: {density_distance(hist, sp):.4f}")

    # Regime numbers
    print("\n5. Spreading proton")
    print("-" * 40)
    report = branchsim.regime_report(branchsim.PhysicalParams())
    for key, value in report.items():
        print(f"  {key:20s} {value:.4g}")

    print("\n=== Demo Complete ===")
    print("\nRun `branchsim --help` for the command line.")


if __name__ == "__main__":
    main()
