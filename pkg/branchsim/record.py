"""
Run records and their CSV, JSON and plot-data renderings.

A :class:`RunRecord` holds the resolved configuration of a run, its sample
rows and a summary. The summary is always derived from the rows (plus the
stored density histogram), so re-analysing a saved record reproduces it.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .config import ScenarioConfig
from .errors import ConfigError, DomainError
from .stats import (DensityHistogram, MeanSeries, density_distance, envelope_summary,
                    fit_decay_exponent, limiting_mean)

logger = logging.getLogger(__name__)

COUNT_COLUMNS = ("t", "countA", "countB", "residualCount", "ratio")
SERIES_COLUMNS = ("t", "meanM", "lnDeviation", "logMeasureDeviation", "aliveClasses",
                  "totalLogCount")
FAMILY_COLUMNS = ("family", "firstEventTime", "totalLogCount", "measure")
STREAM_COLUMNS = ("particles", "events", "meanInterval", "expectedInterval", "relativeError")
REGIME_COLUMNS = ("mass_kg", "width_m", "t0_s", "next_branch_time_s", "delay_factor",
                  "root_ratio", "cells_covered", "threshold_mass_kg", "branch_interval_s",
                  "condition8")

FLOAT_FORMAT = ".17g"


@dataclass
class RunRecord:
    """Everything a run emits.

    ``config`` echoes the resolved inputs (``scenario``, ``physical`` and
    free-form ``parameters``); ``wall_time`` is only set on request so that
    repeated runs render identically.
    """

    kind: str
    mode: str
    config: Dict[str, Any]
    columns: Tuple[str, ...]
    samples: List[Tuple[Any, ...]]
    seed: int = 0
    tool_version: str = ""
    summary: Dict[str, Any] = field(default_factory=dict)
    histogram: Optional[DensityHistogram] = None
    wall_time: Optional[float] = None

    def column(self, name: str) -> List[Any]:
        index = self.columns.index(name)
        return [row[index] for row in self.samples]

    def scenario(self) -> Optional[ScenarioConfig]:
        data = self.config.get("scenario")
        return None if data is None else ScenarioConfig.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "mode": self.mode,
            "config": self.config,
            "columns": list(self.columns),
            "samples": [_plain(list(row)) for row in self.samples],
            "seed": self.seed,
            "tool_version": self.tool_version,
            "summary": _plain(self.summary),
            "histogram": None if self.histogram is None else self.histogram.to_dict(),
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunRecord":
        try:
            histogram = data.get("histogram")
            return cls(
                kind=str(data["kind"]),
                mode=str(data["mode"]),
                config=dict(data["config"]),
                columns=tuple(data["columns"]),
                samples=[tuple(row) for row in data["samples"]],
                seed=int(data.get("seed", 0)),
                tool_version=str(data.get("tool_version", "")),
                summary=dict(data.get("summary", {})),
                histogram=None if histogram is None else DensityHistogram.from_dict(histogram),
                wall_time=data.get("wall_time"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed run record: {exc!r}") from None


def _plain(value: Any) -> Any:
    """JSON-ready copy: non-finite floats become None, tuples become lists."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), FLOAT_FORMAT)
    return str(value)


# -- emitters ------------------------------------------------------------------------------


def emit_csv(record: RunRecord, stream: TextIO) -> None:
    """Header row and one row per sample; floats at 17 significant digits."""
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(record.columns)
    for row in record.samples:
        writer.writerow([_cell(v) for v in row])


def emit_json(record: RunRecord, stream: TextIO) -> None:
    """The whole record with sorted keys; floats use their shortest exact repr."""
    json.dump(record.to_dict(), stream, sort_keys=True, indent=2, allow_nan=False)
    stream.write("\n")


def emit_plot_data(record: RunRecord, stream: TextIO) -> None:
    """Whitespace-separated table with a commented header, readable by gnuplot."""
    stream.write("# " + " ".join(record.columns) + "\n")
    for row in record.samples:
        stream.write(" ".join(_cell(v) or "nan" for v in row) + "\n")


def load(stream: TextIO) -> RunRecord:
    try:
        data = json.load(stream)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"run record is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("run record must be a JSON object")
    return RunRecord.from_dict(data)


# -- summaries -----------------------------------------------------------------------------


def _count_summary(record: RunRecord) -> Dict[str, Any]:
    if not record.samples:
        return {}
    _, count_a, count_b, residual, ratio = record.samples[-1]
    summary: Dict[str, Any] = {
        "final_count_a": count_a,
        "final_count_b": count_b,
        "final_residual_count": residual,
        "final_ratio": f"{count_a}:{count_b}",
        "final_ratio_value": ratio,
    }
    periods = record.config.get("parameters", {}).get("average_periods")
    per_period = record.config.get("parameters", {}).get("samples_per_doubling")
    if periods and per_period:
        tail = record.column("ratio")[-periods * per_period:]
        ratios = np.array([r for r in tail if r is not None], dtype=float)
        if len(ratios) < len(tail):
            raise DomainError("ratio averaging span reaches back before the first B sub-branch")
        summary["time_averaged_ratio"] = float(np.mean(ratios))
        summary["ratio_min"] = float(np.min(ratios))
        summary["ratio_max"] = float(np.max(ratios))
    return summary


def _series_summary(record: RunRecord) -> Dict[str, Any]:
    scenario = record.scenario()
    if scenario is None or not record.samples:
        return {}
    sp = scenario.sp
    target = limiting_mean(sp)
    series = MeanSeries.from_columns(record.column("t"), record.column("meanM"),
                                     record.column("lnDeviation"),
                                     record.column("logMeasureDeviation"),
                                     record.column("aliveClasses"), record.column("totalLogCount"),
                                     scenario.tau, target)
    summary: Dict[str, Any] = {"limiting_mean": target,
                               "final_mean": float(series.mean[-1]),
                               "final_ln_deviation": float(series.ln_deviation[-1]),
                               "final_log_measure_deviation":
                                   float(series.log_measure_deviation[-1]),
                               "envelopes": envelope_summary(series, sp),
                               "log_measure_envelopes": envelope_summary(series, sp,
                                                                         log_measure=True)}
    try:
        summary["decay_exponent"] = fit_decay_exponent(series)
    except DomainError as exc:
        logger.info("no decay fit: %s", exc)
        summary["decay_exponent"] = None
    if record.histogram is not None:
        summary["density_distance"] = density_distance(record.histogram, sp)
    handoff = record.config.get("parameters", {}).get("handoff_time")
    if handoff is not None:
        summary["handoff_time"] = handoff
    return summary


def _family_summary(record: RunRecord) -> Dict[str, Any]:
    rows = {row[0]: row for row in record.samples}
    if 0 not in rows or 1 not in rows:
        return {}
    period = record.config.get("parameters", {}).get("doubling_time")
    summary = {"count_ratio": math.exp(rows[0][2] - rows[1][2]),
               "measure_ratio": rows[0][3] / rows[1][3]}
    if period:
        summary["lead_periods"] = (rows[0][1] - rows[1][1]) / period
    return summary


def _stream_summary(record: RunRecord) -> Dict[str, Any]:
    errors = [abs(e) for e in record.column("relativeError")]
    events = record.column("events")
    return {"max_relative_error": max(errors) if errors else None,
            "min_events": min(events) if events else None}


def _regime_summary(record: RunRecord) -> Dict[str, Any]:
    return {"points": len(record.samples),
            "rebranching_points": sum(1 for t in record.column("next_branch_time_s")
                                      if t is not None)}


SUMMARIES: Dict[Tuple[str, ...], Callable[[RunRecord], Dict[str, Any]]] = {
    COUNT_COLUMNS: _count_summary,
    SERIES_COLUMNS: _series_summary,
    FAMILY_COLUMNS: _family_summary,
    STREAM_COLUMNS: _stream_summary,
    REGIME_COLUMNS: _regime_summary,
}


def summarize(record: RunRecord) -> Dict[str, Any]:
    """Recompute the summary of a record from its rows.

    Raises:
        ConfigError: for a column layout no summary is defined for.
    """
    try:
        summarizer = SUMMARIES[tuple(record.columns)]
    except KeyError:
        raise ConfigError(f"no summary for columns {list(record.columns)!r}") from None
    return _plain(summarizer(record))

