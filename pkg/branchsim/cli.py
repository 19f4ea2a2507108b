"""
Command-line front end.

    branchsim eq5 --doublings 10 --format csv
    branchsim eq6 --doublings 20
    branchsim golden --horizon 8000 --samples-per-decade 64 --progress
    branchsim gaussian --weights gaussian
    branchsim multiparticle --particles 10 100 1000
    branchsim regime --mass-g 1.67e-24 0.1 --width-cm 1e-5
    branchsim run scenario.json --mode aggregated
    branchsim analyze record.json

Exit codes: 0 success, 1 usage error, 2 invalid configuration, 3 exact-mode
population cap exceeded, 4 numerical or I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import multiprocessing
import sys
import time
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional, Sequence, TextIO

from .config import (GRW_RATE, GRW_WIDTH, PROTON_MASS, EngineMode, PhysicalParams, RateScaling,
                     ResidualPolicy, ScenarioConfig, worker_count)
from .engine import AggregatedRun, outcome_counts, run_aggregated, run_exact, run_hybrid
from .errors import (BranchSimError, CapacityError, ConfigError, DomainError, ModeError,
                     PreconditionError)
from .measure import count_ratio, golden_split, make_split_parameter
from .record import (COUNT_COLUMNS, FAMILY_COLUMNS, REGIME_COLUMNS, SERIES_COLUMNS,
                     STREAM_COLUMNS, RunRecord, emit_csv, emit_json, emit_plot_data, load,
                     summarize)
from .scenarios import (FAMILY_A, FAMILY_B, build_eq5, build_eq6, build_gaussian_pair,
                        build_golden, build_two_outcome, doubling_time,
                        family_first_event_times, multiparticle_stream, regime_report)
from .stats import density_histogram

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_CAPACITY = 3
EXIT_NUMERICAL = 4


class _Parser(argparse.ArgumentParser):
    """Reports usage errors with exit code 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _split(args: argparse.Namespace):
    return golden_split() if args.golden else make_split_parameter(args.z)


# -- record builders -------------------------------------------------------------------------


def _count_rows(snapshots, policy: ResidualPolicy) -> List[tuple]:
    rows = []
    for snapshot in snapshots:
        pure = snapshot.pure_counts()
        counts = outcome_counts(snapshot, residual_policy=policy)
        ratio = None
        if FAMILY_A in counts and FAMILY_B in counts:
            ratio = count_ratio(counts[FAMILY_A], counts[FAMILY_B])
        rows.append((snapshot.time, pure.get(FAMILY_A, 0), pure.get(FAMILY_B, 0),
                     snapshot.residual_count, ratio))
    return rows


def _exact_record(kind: str, scenario: ScenarioConfig,
                  parameters: Optional[Dict[str, Any]] = None) -> RunRecord:
    snapshots = run_exact(scenario)
    return RunRecord(kind, scenario.mode.value,
                     {"scenario": scenario.to_dict(), "parameters": parameters or {}},
                     COUNT_COLUMNS, _count_rows(snapshots, scenario.residual_policy),
                     seed=scenario.seed)


def _series_record(kind: str, scenario: ScenarioConfig, result: AggregatedRun,
                   bins: int) -> RunRecord:
    parameters: Dict[str, Any] = {"bins": bins}
    if result.handoff_time is not None:
        parameters["handoff_time"] = result.handoff_time
    histogram = density_histogram(result.final, result.horizon, bins=bins)
    return RunRecord(kind, scenario.mode.value,
                     {"scenario": scenario.to_dict(), "parameters": parameters},
                     SERIES_COLUMNS, result.series.rows(), seed=scenario.seed,
                     histogram=histogram)


def _family_record(scenario: ScenarioConfig, result: AggregatedRun,
                   parameters: Dict[str, Any]) -> RunRecord:
    first = family_first_event_times(scenario)
    counts = outcome_counts(result.final)
    measures: Dict[int, float] = {}
    for component in scenario.components:
        for cell in component.cells:
            measures[cell.family] = measures.get(cell.family, 0.0) + cell.m0 * cell.multiplicity
    rows = [(family, first[family], counts[family].log(), measures[family])
            for family in sorted(counts)]
    parameters = dict(parameters, doubling_time=doubling_time(scenario.tau))
    return RunRecord("gaussian", scenario.mode.value,
                     {"scenario": scenario.to_dict(), "parameters": parameters},
                     FAMILY_COLUMNS, rows, seed=scenario.seed)


# -- subcommands ------------------------------------------------------------------------------


def _read_scenario(path: str) -> ScenarioConfig:
    with open(path, encoding="utf-8") as handle:
        try:
            document = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    if isinstance(document, dict) and "scenario" in document:
        document = document["scenario"]
    return ScenarioConfig.from_dict(document)


def _cmd_run(args: argparse.Namespace) -> RunRecord:
    scenario = _read_scenario(args.config)
    changes: Dict[str, Any] = {}
    if args.horizon is not None:
        changes["horizon"] = args.horizon
    if args.mode is not None:
        changes["mode"] = EngineMode(args.mode)
    if args.residual_policy is not None:
        changes["residual_policy"] = ResidualPolicy(args.residual_policy)
    if args.seed is not None:
        changes["seed"] = args.seed
    scenario = scenario.with_overrides(**changes).validate()
    if args.print_config:
        return _config_only(scenario)
    if scenario.mode is EngineMode.EXACT:
        return _exact_record("run", scenario)
    runner = run_aggregated if scenario.mode is EngineMode.AGGREGATED else run_hybrid
    return _series_record("run", scenario, runner(scenario, progress=args.progress), args.bins)


def _cmd_eq5(args: argparse.Namespace) -> RunRecord:
    scenario = build_eq5(args.doublings, args.tau)
    scenario = scenario.with_overrides(residual_policy=ResidualPolicy(args.residual_policy))
    if args.print_config:
        return _config_only(scenario)
    return _exact_record("eq5", scenario, {"doublings": args.doublings})


def _cmd_eq6(args: argparse.Namespace) -> RunRecord:
    scenario = build_eq6(args.doublings, args.tau)
    scenario = scenario.with_overrides(residual_policy=ResidualPolicy(args.residual_policy))
    if args.print_config:
        return _config_only(scenario)
    return _exact_record("eq6", scenario, {"doublings": args.doublings})


def _cmd_two_outcome(args: argparse.Namespace) -> RunRecord:
    scenario = build_two_outcome(args.measure_a, 1.0 - args.measure_a, args.doublings,
                                 args.samples_per_doubling, args.tau)
    if args.print_config:
        return _config_only(scenario)
    parameters = {"doublings": args.doublings, "samples_per_doubling": args.samples_per_doubling,
                  "average_periods": args.average_periods}
    return _exact_record("two-outcome", scenario, parameters)


def _cmd_gaussian(args: argparse.Namespace) -> RunRecord:
    scenario = build_gaussian_pair(args.width_a, args.width_b, args.measure_a,
                                   1.0 - args.measure_a, args.cell_width, _split(args), args.tau,
                                   args.weights, args.shells, args.rounds_after)
    if args.print_config:
        return _config_only(scenario)
    result = run_aggregated(scenario, progress=args.progress)
    return _family_record(scenario, result, {"weights": args.weights,
                                             "rounds_after": args.rounds_after})


def _cmd_golden(args: argparse.Namespace) -> RunRecord:
    scenario = build_golden(args.horizon, args.components, args.tau, args.samples_per_decade)
    if args.print_config:
        return _config_only(scenario)
    return _series_record("golden", scenario, run_aggregated(scenario, progress=args.progress),
                          args.bins)


def _cmd_multiparticle(args: argparse.Namespace) -> RunRecord:
    sp = _split(args)
    parameters = {"z": sp.z, "tau1": args.tau1, "events": args.events,
                  "particles": list(args.particles)}
    if args.print_config:
        return RunRecord("config", "stream", {"parameters": parameters}, (), [], seed=args.seed)
    rows = []
    for n in args.particles:
        single = -0.5 * (sp.log_z + sp.log_one_minus_z) * args.tau1
        stream = multiparticle_stream(n, sp, args.tau1, args.seed, args.events * single / n)
        expected = stream.expected_interval
        rows.append((n, len(stream.times), stream.mean_interval, expected,
                     stream.mean_interval / expected - 1.0))
    return RunRecord("multiparticle", "stream", {"parameters": parameters}, STREAM_COLUMNS, rows,
                     seed=args.seed)


def _regime_point(payload: Dict[str, Any]) -> Dict[str, Any]:
    return regime_report(PhysicalParams.from_dict(payload))


def _cmd_regime(args: argparse.Namespace) -> RunRecord:
    scaling = RateScaling(args.rate_scaling)
    points = [PhysicalParams.from_cgs(mass, width, rate=args.rate, rate_scaling=scaling)
              for mass in args.mass_g for width in args.width_cm]
    parameters = {"mass_g": list(args.mass_g), "width_cm": list(args.width_cm),
                  "rate": args.rate, "rate_scaling": scaling.value}
    config = {"physical": points[0].to_dict(), "parameters": parameters}
    if args.print_config:
        return RunRecord("config", "closed-form", config, (), [])
    payloads = [p.to_dict() for p in points]
    workers = min(worker_count(args.threads), len(payloads))
    if workers > 1:
        logger.info("regime sweep of %d points on %d workers", len(payloads), workers)
        with multiprocessing.Pool(workers) as pool:
            reports = list(pool.imap(_regime_point, payloads))
    else:
        reports = [_regime_point(payload) for payload in payloads]
    rows = [tuple(report[name] for name in REGIME_COLUMNS) for report in reports]
    return RunRecord("regime", "closed-form", config, REGIME_COLUMNS, rows)


def _cmd_analyze(args: argparse.Namespace) -> RunRecord:
    with open(args.record, encoding="utf-8") as handle:
        record = load(handle)
    if args.print_config:
        return _config_only_record(record)
    return record


def _config_only(scenario: ScenarioConfig) -> RunRecord:
    return RunRecord("config", scenario.mode.value, {"scenario": scenario.to_dict()}, (), [],
                     seed=scenario.seed)


def _config_only_record(record: RunRecord) -> RunRecord:
    return RunRecord("config", record.mode, record.config, (), [], seed=record.seed)


# -- parser -----------------------------------------------------------------------------------


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("json", "csv"), default="json",
                        help="result format on the output stream (default: json)")
    common.add_argument("--output", "-o", help="write the result here instead of stdout")
    common.add_argument("--plot-data", metavar="PATH",
                        help="also write a whitespace-separated table for plotting")
    common.add_argument("--print-config", action="store_true",
                        help="print the fully resolved configuration and exit")
    common.add_argument("--log-level", choices=("debug", "info", "warning", "error"),
                        default="warning")
    common.add_argument("--timing", action="store_true",
                        help="record wall time (output is then no longer reproducible)")
    common.add_argument("--progress", action="store_true", help="progress bar on stderr")
    return common


def _add_split_options(parser: argparse.ArgumentParser, default_z: float = 0.5) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--z", type=float, default=default_z, help="split parameter Z")
    group.add_argument("--golden", action="store_true",
                       help="use the Z with ln Z / ln(1-Z) equal to the golden ratio")


def _policy_option(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--residual-policy", choices=[p.value for p in ResidualPolicy],
                        default=ResidualPolicy.COUNT_AS_SPLIT.value)


def build_parser() -> argparse.ArgumentParser:
    from . import __version__

    parser = _Parser(prog="branchsim", description="Deterministic anomalous-branching simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _common_options()
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p_run = sub.add_parser("run", parents=[common], help="run a scenario config file")
    p_run.add_argument("config", help="JSON scenario document")
    p_run.add_argument("--horizon", type=float)
    p_run.add_argument("--mode", choices=[m.value for m in EngineMode])
    p_run.add_argument("--residual-policy", choices=[p.value for p in ResidualPolicy])
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--bins", type=int, default=64, help="density histogram bins")
    p_run.set_defaults(func=_cmd_run)

    for name, func, help_text in (("eq5", _cmd_eq5, "equal-measure two-outcome sequence"),
                                  ("eq6", _cmd_eq6, "2:1 measure two-outcome sequence")):
        p_eq = sub.add_parser(name, parents=[common], help=help_text)
        p_eq.add_argument("--doublings", type=int, default=3)
        p_eq.add_argument("--tau", type=float, default=1.0)
        _policy_option(p_eq)
        p_eq.set_defaults(func=func)

    p_two = sub.add_parser("two-outcome", parents=[common],
                           help="Z=1/2 two-outcome run with an arbitrary measure split")
    p_two.add_argument("--measure-a", type=float, default=0.6)
    p_two.add_argument("--doublings", type=int, default=8)
    p_two.add_argument("--samples-per-doubling", type=int, default=16)
    p_two.add_argument("--average-periods", type=int, default=4)
    p_two.add_argument("--tau", type=float, default=1.0)
    p_two.set_defaults(func=_cmd_two_outcome)

    p_gauss = sub.add_parser("gaussian", parents=[common],
                             help="two outcome families spread over many pointer cells")
    p_gauss.add_argument("--width-a", type=float, default=400.0, help="in cell widths")
    p_gauss.add_argument("--width-b", type=float, default=100.0, help="in cell widths")
    p_gauss.add_argument("--measure-a", type=float, default=2.0 / 3.0)
    p_gauss.add_argument("--cell-width", type=float, default=1.0)
    p_gauss.add_argument("--weights", choices=("uniform", "gaussian"), default="uniform")
    p_gauss.add_argument("--shells", type=int, default=64)
    p_gauss.add_argument("--rounds-after", type=float, default=20.0)
    p_gauss.add_argument("--tau", type=float, default=1.0)
    _add_split_options(p_gauss)
    p_gauss.set_defaults(func=_cmd_gaussian)

    p_golden = sub.add_parser("golden", parents=[common],
                              help="aggregated run at the golden-ratio split")
    p_golden.add_argument("--horizon", type=float, default=8000.0, help="in units of tau")
    p_golden.add_argument("--samples-per-decade", type=int, default=64)
    p_golden.add_argument("--components", type=int, default=1)
    p_golden.add_argument("--bins", type=int, default=64)
    p_golden.add_argument("--tau", type=float, default=1.0)
    p_golden.set_defaults(func=_cmd_golden)

    p_multi = sub.add_parser("multiparticle", parents=[common],
                             help="merged event stream of N dephased particles")
    p_multi.add_argument("--particles", type=int, nargs="+", default=[10, 100, 1000])
    p_multi.add_argument("--events", type=int, default=10000,
                         help="target number of events per stream")
    p_multi.add_argument("--tau1", type=float, default=1.0)
    p_multi.add_argument("--seed", type=int, default=0)
    _add_split_options(p_multi)
    p_multi.set_defaults(func=_cmd_multiparticle)

    p_regime = sub.add_parser("regime", parents=[common],
                              help="spreading delay, mass thresholds and growth conditions")
    p_regime.add_argument("--mass-g", type=float, nargs="+", default=[PROTON_MASS * 1e3])
    p_regime.add_argument("--width-cm", type=float, nargs="+", default=[GRW_WIDTH * 1e2])
    p_regime.add_argument("--rate", type=float, default=GRW_RATE, help="1/tau1 in 1/s")
    p_regime.add_argument("--rate-scaling", choices=[s.value for s in RateScaling],
                          default=RateScaling.MASS_INDEPENDENT.value)
    p_regime.add_argument("--threads", type=int,
                          help="worker processes (default: BRANCHSIM_THREADS or CPU count)")
    p_regime.set_defaults(func=_cmd_regime)

    p_analyze = sub.add_parser("analyze", parents=[common],
                               help="recompute the summary of a saved JSON record")
    p_analyze.add_argument("record")
    p_analyze.set_defaults(func=_cmd_analyze)
    return parser


# -- output -----------------------------------------------------------------------------------


@contextmanager
def _opened(path: Optional[str], stdout: TextIO) -> Iterator[TextIO]:
    if path is None:
        yield stdout
        return
    with open(path, "w", encoding="utf-8", newline="") as handle:
        yield handle


def _write(record: RunRecord, args: argparse.Namespace, stdout: TextIO) -> None:
    if record.kind == "config":
        json.dump(record.config, stdout, sort_keys=True, indent=2)
        stdout.write("\n")
        return
    with _opened(args.output, stdout) as stream:
        if args.format == "csv":
            emit_csv(record, stream)
        else:
            emit_json(record, stream)
    if args.plot_data:
        with _opened(args.plot_data, stdout) as stream:
            emit_plot_data(record, stream)


def _configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper()), format=LOG_FORMAT,
                        stream=sys.stderr, force=True)


def main(argv: Optional[Sequence[str]] = None, stdout: Optional[TextIO] = None) -> int:
    """Parse ``argv``, run the command and write its record; return the exit code."""
    from . import __version__

    stdout = sys.stdout if stdout is None else stdout
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    _configure_logging(args.log_level)
    started = time.perf_counter()
    try:
        record = args.func(args)
        if record.kind != "config":
            record.tool_version = __version__
            record.summary = summarize(record)
            if args.timing:
                record.wall_time = time.perf_counter() - started
        _write(record, args, stdout)
    except CapacityError as exc:
        print(f"branchsim: capacity exceeded: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (ConfigError, ModeError) as exc:
        print(f"branchsim: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PreconditionError as exc:
        print(f"branchsim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DomainError as exc:
        print(f"branchsim: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BranchSimError, OSError, ArithmeticError) as exc:
        print(f"branchsim: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    logger.info("%s finished in %.3fs", args.command, time.perf_counter() - started)
    return EXIT_OK


def run() -> None:
    """Console script entry point."""
    sys.exit(main())
