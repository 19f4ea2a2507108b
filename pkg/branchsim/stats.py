"""
Statistics of branching runs.

The count-weighted mean ``<M>_C`` of the monitored quantity approaches
``Z ln(1/Z) + (1 - Z) ln(1/(1 - Z))``; the distribution of ``M`` over
sub-branches approaches the stationary density

    rho(M) = Z' / M**2   for Z' <= M < 1 - Z'
    rho(M) = 1 / M**2    for 1 - Z' <= M <= 1

with ``Z' = min(Z, 1 - Z)``. Deviations are measured in log space.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import quad

from .errors import DomainError
from .measure import (ClassKey, SplitParameter, binomial_log, iter_keys_below,
                      logsumexp_accumulate, split_pair)

logger = logging.getLogger(__name__)

DEFAULT_WINDOWS: Tuple[Tuple[str, float, float], ...] = (
    ("w25", 25.0, 8000.0),
    ("w150", 150.0, 8000.0),
    ("w4300", 4300.0, 8000.0),
)
"""Envelope windows in units of tau, keyed by their summary field name."""

_QUAD_OPTIONS = dict(epsabs=1e-14, epsrel=1e-13, limit=200)

ArrayLike = Union[float, Sequence[float], np.ndarray]


# -- mean series --------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MeanSeries:
    """Samples of ``<M>_C`` over time.

    ``ln_deviation`` is ``ln <M>_C - ln limiting_mean``;
    ``log_measure_deviation`` is the count-weighted mean of ``ln M`` minus
    its stationary value, NaN where it was not recorded.
    """

    times: np.ndarray
    log_mean: np.ndarray
    ln_deviation: np.ndarray
    log_measure_deviation: np.ndarray
    alive: np.ndarray
    log_count: np.ndarray
    tau: float = 1.0
    limiting: float = math.nan

    def __len__(self) -> int:
        return len(self.times)

    @property
    def mean(self) -> np.ndarray:
        return np.exp(self.log_mean)

    @classmethod
    def from_rows(cls, rows: Sequence[Tuple[float, float, float, int, float]], tau: float,
                  limiting: float) -> "MeanSeries":
        """Rows of ``(t, ln<M>, <ln M> deviation, alive classes, ln N)``."""
        data = np.array(rows, dtype=float).reshape(-1, 5)
        log_mean = data[:, 1]
        return cls(data[:, 0], log_mean, log_mean - math.log(limiting), data[:, 2],
                   data[:, 3].astype(np.int64), data[:, 4], tau, limiting)

    @classmethod
    def from_columns(cls, times: Sequence[float], means: Sequence[float],
                     ln_deviation: Sequence[float], log_measure_deviation: Sequence[float],
                     alive: Sequence[int], log_count: Sequence[float], tau: float,
                     limiting: float) -> "MeanSeries":
        """Rebuild a series from emitted record columns; missing values become NaN."""
        times = np.asarray(times, dtype=float)
        return cls(times, np.log(np.asarray(means, dtype=float)),
                   np.asarray(ln_deviation, dtype=float),
                   np.asarray(log_measure_deviation, dtype=float),
                   np.asarray(alive, dtype=np.int64), np.asarray(log_count, dtype=float),
                   tau, limiting)

    @classmethod
    def from_means(cls, times: Sequence[float], means: Sequence[float], tau: float = 1.0,
                   limiting: float = math.nan) -> "MeanSeries":
        times = np.asarray(times, dtype=float)
        log_mean = np.log(np.asarray(means, dtype=float))
        blank = np.full(len(times), math.nan)
        return cls(times, log_mean, log_mean - math.log(limiting), blank,
                   np.zeros(len(times), dtype=np.int64), blank, tau, limiting)

    def rows(self) -> List[Tuple[float, float, float, float, int, float]]:
        """``(t, meanM, lnDeviation, logMeasureDeviation, aliveClasses, totalLogCount)``."""
        return [(float(t), float(m), float(d), float(e), int(n), float(c))
                for t, m, d, e, n, c in zip(self.times, self.mean, self.ln_deviation,
                                            self.log_measure_deviation, self.alive,
                                            self.log_count)]

    def deviation_against(self, sp: SplitParameter) -> np.ndarray:
        target = limiting_mean(sp)
        if target == self.limiting:
            return self.ln_deviation
        return self.log_mean - math.log(target)


# -- means over class tables -----------------------------------------------------------


def _log_sums(table) -> Tuple[float, float]:
    if len(table) == 0:
        raise DomainError("mean over an empty class table")
    keys = table.keys()
    log_counts = [table.log_count(key) for key in keys]
    weighted = logsumexp_accumulate(c + table.class_log_measure(key)
                                    for c, key in zip(log_counts, keys))
    return weighted, logsumexp_accumulate(log_counts)


def mean_measure(table, t: float) -> float:
    """Count-weighted mean of ``M = measure * g * exp(t / tau)`` at time t.

    Raises:
        DomainError: for an empty table or a time before the table's state.
    """
    if t < table.time - 1e-9 * table.tau:
        raise DomainError(f"table describes t={table.time!r}, cannot evaluate at t={t!r}")
    weighted, total = _log_sums(table)
    return math.exp(math.log(table.g) + t / table.tau + weighted - total)


def mean_sub_branch_measure(table) -> float:
    """Count-weighted mean of the plain sub-branch measures."""
    weighted, total = _log_sums(table)
    return math.exp(weighted - total)


# -- stationary density ------------------------------------------------------------------


def limiting_mean(sp: SplitParameter) -> float:
    """``Z ln(1/Z) + (1 - Z) ln(1/(1 - Z))``."""
    return -sp.z * sp.log_z - (1.0 - sp.z) * sp.log_one_minus_z


def stationary_density(m: float, sp: SplitParameter) -> float:
    if not 0.0 < m <= 1.0:
        raise DomainError(f"M must lie in (0, 1], got {m!r}")
    zp = sp.z_prime
    if m < zp:
        return 0.0
    if m < 1.0 - zp:
        return zp / (m * m)
    return 1.0 / (m * m)


def stationary_cdf(m: ArrayLike, sp: SplitParameter) -> Union[float, np.ndarray]:
    """Cumulative distribution of the stationary density; accepts arrays."""
    zp = sp.z_prime
    values = np.asarray(m, dtype=float)
    with np.errstate(divide="ignore"):
        lower = 1.0 - zp / values
        upper = 1.0 - zp / (1.0 - zp) + 1.0 / (1.0 - zp) - 1.0 / values
    result = np.where(values < zp, 0.0, np.where(values < 1.0 - zp, lower, upper))
    result = np.clip(np.where(values >= 1.0, 1.0, result), 0.0, 1.0)
    return float(result) if result.ndim == 0 else result


def stationary_log_mean(sp: SplitParameter) -> float:
    """Mean of ``ln M`` under the stationary density."""
    zp = sp.z_prime

    def antiderivative(m: float) -> float:  # of ln(m) / m**2
        return -(math.log(m) + 1.0) / m

    return (zp * (antiderivative(1.0 - zp) - antiderivative(zp))
            + antiderivative(1.0) - antiderivative(1.0 - zp))


def stationary_moments(sp: SplitParameter) -> Tuple[float, float]:
    """Normalization and mean of the stationary density by quadrature."""
    zp = sp.z_prime
    pieces = [(zp, 1.0 - zp, lambda m: zp / (m * m)), (1.0 - zp, 1.0, lambda m: 1.0 / (m * m))]
    norm = mean = 0.0
    for low, high, density in pieces:
        if high <= low:
            continue
        norm += quad(density, low, high, **_QUAD_OPTIONS)[0]
        mean += quad(lambda m: m * density(m), low, high, **_QUAD_OPTIONS)[0]
    return norm, mean


def push_forward_cdf(cdf: Callable[[float], float], sp: SplitParameter, growth: float,
                     m: float) -> float:
    """CDF after every sub-branch grows by ``growth`` and those past 1 split once.

    Counts are renormalized after the split. ``growth`` must not exceed
    ``1 / (1 - Z')`` so that no child is itself past the threshold.
    """
    zp = sp.z_prime
    if not 1.0 < growth <= 1.0 / (1.0 - zp) * (1.0 + 1e-12):
        raise DomainError(f"growth factor must lie in (1, 1/(1-Z')], got {growth!r}")
    if not 0.0 < m <= 1.0:
        raise DomainError(f"M must lie in (0, 1], got {m!r}")
    split_from = cdf(1.0 / growth)
    unsplit = cdf(min(m, 1.0) / growth)
    created = max(0.0, cdf(min(1.0, m / (sp.z * growth))) - split_from)
    remaining = max(0.0, cdf(min(1.0, m / ((1.0 - sp.z) * growth))) - split_from)
    return (unsplit + created + remaining) / (2.0 - split_from)


# -- histograms -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DensityHistogram:
    """Count-weighted occupancy of logarithmic bins in M."""

    edges: np.ndarray
    weights: np.ndarray
    normalized: bool = True

    def to_dict(self) -> Dict[str, List[float]]:
        return {"edges": [float(e) for e in self.edges], "weights": [float(w) for w in self.weights]}

    @classmethod
    def from_dict(cls, data: Dict[str, Sequence[float]]) -> "DensityHistogram":
        weights = np.asarray(data["weights"], dtype=float)
        return cls(np.asarray(data["edges"], dtype=float), weights,
                   abs(weights.sum() - 1.0) <= 1e-9)


def default_edges(sp: SplitParameter, bins: int = 64) -> np.ndarray:
    low = sp.z_prime * (1.0 - sp.z_prime)
    return np.exp(np.linspace(math.log(low), 0.0, bins + 1))


def density_histogram(table, t: float, bins: int = 64,
                      edges: Optional[np.ndarray] = None) -> DensityHistogram:
    """Histogram of M over the classes of ``table`` at time t."""
    if len(table) == 0:
        raise DomainError("histogram of an empty class table")
    edges = default_edges(table.sp, bins) if edges is None else np.asarray(edges, dtype=float)
    keys = table.keys()
    log_counts = np.array([table.log_count(key) for key in keys])
    log_m = math.log(table.g) + t / table.tau + np.array([table.class_log_measure(k) for k in keys])
    index = np.clip(np.searchsorted(np.log(edges), log_m, side="right") - 1, 0, len(edges) - 2)
    weights = np.zeros(len(edges) - 1)
    np.add.at(weights, index, np.exp(log_counts - log_counts.max()))
    return DensityHistogram(edges, weights / weights.sum(), True)


def density_distance(hist: DensityHistogram, sp: SplitParameter) -> float:
    """Sup-norm distance between the histogram CDF and the stationary CDF at the bin edges.

    Raises:
        DomainError: for an unnormalized histogram.
    """
    if not hist.normalized or abs(float(np.sum(hist.weights)) - 1.0) > 1e-9:
        raise DomainError("density distance needs a normalized histogram")
    empirical = np.concatenate(([0.0], np.cumsum(hist.weights)))
    model = stationary_cdf(hist.edges, sp)
    return float(np.max(np.abs(empirical - model)))


# -- envelopes and fits ------------------------------------------------------------------


def fluctuation_envelope(series: MeanSeries, sp: SplitParameter,
                         windows: Sequence[Tuple[float, float]]) -> List[float]:
    """Largest ``|ln <M>_C - ln limiting_mean|`` inside each ``(t_min, t_max)`` window.

    Raises:
        DomainError: if a window holds no samples.
    """
    deviation = np.abs(series.deviation_against(sp))
    result = []
    for low, high in windows:
        mask = (series.times >= low) & (series.times <= high)
        if not mask.any():
            raise DomainError(f"no samples in window ({low!r}, {high!r})")
        result.append(float(deviation[mask].max()))
    return result


def log_deviation_series(series: MeanSeries) -> np.ndarray:
    """``|<ln M>_C - stationary mean of ln M|`` per sample."""
    return np.abs(series.log_measure_deviation)


def log_deviation_envelope(series: MeanSeries,
                           windows: Sequence[Tuple[float, float]]) -> List[float]:
    """Maximum of :func:`log_deviation_series` over each window; NaN samples are skipped."""
    deviation = log_deviation_series(series)
    result = []
    for low, high in windows:
        mask = (series.times >= low) & (series.times <= high) & np.isfinite(deviation)
        if not mask.any():
            raise DomainError(f"no ln M deviation samples in window ({low!r}, {high!r})")
        result.append(float(deviation[mask].max()))
    return result


def envelope_summary(series: MeanSeries, sp: SplitParameter,
                     windows: Sequence[Tuple[str, float, float]] = DEFAULT_WINDOWS,
                     log_measure: bool = False) -> Dict[str, Optional[float]]:
    """Envelopes for the named windows (in units of tau) the series reaches.

    With ``log_measure`` the envelopes are those of the ``<ln M>_C`` deviation.
    """
    result: Dict[str, Optional[float]] = {}
    last = float(series.times[-1]) if len(series) else 0.0
    for name, low, high in windows:
        low, high = low * series.tau, min(high * series.tau, last)
        try:
            if high <= low:
                result[name] = None
            elif log_measure:
                result[name] = log_deviation_envelope(series, [(low, high)])[0]
            else:
                result[name] = fluctuation_envelope(series, sp, [(low, high)])[0]
        except DomainError:
            result[name] = None
    return result


def fit_decay_exponent(series: MeanSeries, bins_per_decade: int = 4,
                       t_min: Optional[float] = None) -> float:
    """Slope of ln(envelope maximum) against ln t, one point per log-time bin.

    Only samples at or after ``t_min`` (default 10 tau) are used.

    Raises:
        DomainError: with fewer than 20 samples or less than two decades of span.
    """
    t_min = 10.0 * series.tau if t_min is None else t_min
    mask = series.times >= t_min
    times = series.times[mask]
    deviation = np.abs(series.ln_deviation[mask])
    if len(times) < 20 or math.log10(times[-1] / times[0]) < 2.0:
        raise DomainError(f"decay fit needs 20 samples over two decades, got {len(times)} samples")
    bins = np.floor(bins_per_decade * np.log10(times / t_min) + 1e-9).astype(int)
    xs, ys = [], []
    for b in np.unique(bins):
        in_bin = np.flatnonzero(bins == b)
        best = in_bin[np.argmax(deviation[in_bin])]
        if deviation[best] > 0.0:
            xs.append(math.log(times[best]))
            ys.append(math.log(deviation[best]))
    if len(xs) < 2:
        raise DomainError("decay fit needs at least two non-zero envelope points")
    slope, _ = np.polyfit(np.array(xs), np.array(ys), 1)
    return float(slope)


# -- rational ratios -----------------------------------------------------------------------


def transfer_matrix(sp: SplitParameter) -> np.ndarray:
    """One-lattice-step map of the bin occupancy counts.

    Bin j covers ``[ln Z' + j u, ln Z' + (j + 1) u)`` in ln M. Every class
    moves up one bin; the top bin branches into bins ``K - p`` and ``K - q``
    for a log ratio ``p/q``.
    """
    bins = sp.lattice_steps
    p, q = sp.ratio_class.numerator, sp.ratio_class.denominator
    matrix = np.zeros((bins, bins))
    for j in range(bins - 1):
        matrix[j + 1, j] = 1.0
    matrix[bins - p, bins - 1] += 1.0
    matrix[bins - q, bins - 1] += 1.0
    return matrix


def transfer_fixed_point(matrix: np.ndarray, tolerance: float = 1e-15,
                         max_iterations: int = 100000) -> np.ndarray:
    """Normalized fixed point of the transfer map, by iteration."""
    vector = np.full(matrix.shape[0], 1.0 / matrix.shape[0])
    for _ in range(max_iterations):
        following = matrix @ vector
        following /= following.sum()
        if np.max(np.abs(following - vector)) <= tolerance:
            return following
        vector = following
    logger.warning("transfer map iteration did not settle within %d steps", max_iterations)
    return vector


@dataclass(frozen=True, eq=False)
class BinOccupancy:
    times: np.ndarray
    occupancy: np.ndarray
    fixed_point: np.ndarray
    mean_ambiguity_bound: float

    @property
    def final_distance(self) -> float:
        return float(np.max(np.abs(self.occupancy[-1] - self.fixed_point)))


def bin_occupancy(table, t: float) -> np.ndarray:
    """Count share of each lattice bin of a rational-ratio table at time t."""
    sp = table.sp
    bins = sp.lattice_steps
    unit = -sp.log_z_prime / bins
    keys = table.keys()
    log_counts = np.array([table.log_count(key) for key in keys])
    log_m = math.log(table.g) + t / table.tau + np.array([table.class_log_measure(k) for k in keys])
    index = np.clip(np.floor((log_m - sp.log_z_prime) / unit).astype(int), 0, bins - 1)
    weights = np.zeros(bins)
    np.add.at(weights, index, np.exp(log_counts - log_counts.max()))
    return weights / weights.sum()


def rational_bin_occupancy(sp: SplitParameter, t_max: float, tau: float = 1.0,
                           settings=None) -> BinOccupancy:
    """Lattice-bin occupancies of a single component started at threshold.

    Samples sit half a lattice step past each event round, where no class
    lies on a bin edge.

    Raises:
        DomainError: if the log ratio of ``sp`` is irrational.
    """
    from .engine import AggregatedEngine, ClassTable
    from .measure import BigCount

    bins = sp.lattice_steps
    unit = -sp.log_z_prime / bins
    table = ClassTable(sp, tau, 1.0, [0.0], [0])
    table.add(ClassKey(0, 0, 0), BigCount.of(1))
    engine = AggregatedEngine(table, settings)
    times, rows = [], []
    k = 0
    while (k + 0.5) * unit * tau <= t_max:
        t = (k + 0.5) * unit * tau
        engine.advance(t)
        times.append(t)
        rows.append(bin_occupancy(engine.table, t))
        k += 1
    fixed_point = transfer_fixed_point(transfer_matrix(sp))
    bound = sp.z_prime ** (1.0 / bins)
    return BinOccupancy(np.array(times), np.array(rows).reshape(-1, bins), fixed_point, bound)


# -- binomial oracle -------------------------------------------------------------------------


def alive_class_counts(sp: SplitParameter, t: float, m0: float = 0.0, g: float = 1.0,
                       tau: float = 1.0, component_id: int = 0,
                       window: Optional[float] = None,
                       log_domain: bool = False) -> Dict[ClassKey, Union[int, float]]:
    """Closed-form class counts of one component with initial count 1.

    A class has fired once its branch time is at most ``t + window``; an
    unfired class with at least one fired parent is alive and holds the sum
    of its fired parents' counts ``C(a + b, a)``. With ``log_domain`` the
    counts are natural logs built from :func:`binomial_log`.
    """
    window = 1e-12 * tau if window is None else window
    budget = (t + window) / tau + m0 + math.log(g)
    fired_keys = {(key.a, key.b) for key in iter_keys_below(component_id, sp, budget)}
    if not fired_keys:
        root = ClassKey(component_id, 0, 0)
        return {root: 0.0 if log_domain else 1}
    parents: Dict[ClassKey, List[Tuple[int, int]]] = {}
    for a, b in fired_keys:
        for child in split_pair(ClassKey(component_id, a, b)):
            if (child.a, child.b) not in fired_keys:
                parents.setdefault(child, []).append((a, b))
    if log_domain:
        return {key: logsumexp_accumulate(binomial_log(a + b, a) for a, b in parents[key])
                for key in sorted(parents)}
    return {key: sum(math.comb(a + b, a) for a, b in parents[key]) for key in sorted(parents)}
