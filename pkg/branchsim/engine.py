"""
Event-driven engines for the anomalous branching dynamics.

Two engines share one event loop shape: a heap of ``(time, key)`` entries
where the key order ``(component_id, a, b, cell_id)`` is the canonical
tie-break for events that fall inside the simultaneity window.

* :class:`ExactEngine` keeps every labeled sub-branch. Sub-branches that
  share a class and a cell share a branch time, so they are held in one
  bucket whose labels are a :class:`LabelGroup` tree.
* :class:`AggregatedEngine` keeps only class counts of single-cell
  components and reaches thousands of growth times.

:class:`StateVectorToy` is the literal vector form of the branching
algorithm and only serves as an oracle for the reduced splitting rule.
"""

from __future__ import annotations

import heapq
import logging
import math
import sys
import time as _time
from dataclasses import dataclass
from types import MappingProxyType
from typing import (Callable, Dict, FrozenSet, Iterable, Iterator, List, Mapping, Optional,
                    Sequence, Tuple, Union)

import numpy as np
from tqdm import tqdm

from .config import EngineMode, EngineSettings, ResidualPolicy, ScenarioConfig
from .errors import (CapacityError, DomainError, InvariantError, ModeError, PreconditionError,
                     SchedulingError)
from .measure import (LOG_ZERO, BigCount, ClassKey, LogMeasure, SplitParameter,
                      branch_time, log_add, logsumexp_accumulate)
from .stats import MeanSeries, limiting_mean, stationary_log_mean

logger = logging.getLogger(__name__)

MIXED_FAMILY = -1
"""Outcome family used for residual superpositions under ``countAsOne``."""

Label = Tuple[Tuple[int, float], ...]
"""Chronological ``(cell_id, time)`` events; the empty label is the initial label."""

BucketKey = Tuple[int, int, int, int]
"""``(component_id, a, b, cell_id)``, also the canonical event order."""

_NORM_TOLERANCE = 1e-12
_THRESHOLD_TOLERANCE = 1e-9
_GRID_START = 1e-2  # first log-grid point, in units of tau


# -- labels and sub-branches ---------------------------------------------------


class LabelGroup:
    """A set of labels: every label of ``bases`` extended by ``event``.

    The root group holds the single initial label. Groups are immutable and
    shared between buckets, so a bucket of n sub-branches costs one group
    per branching event rather than n labels.
    """

    __slots__ = ("bases", "event", "size")

    def __init__(self, bases: Tuple["LabelGroup", ...], event: Optional[Tuple[int, float]],
                 size: int) -> None:
        self.bases = bases
        self.event = event
        self.size = size

    @classmethod
    def root(cls) -> "LabelGroup":
        return cls((), None, 1)

    @classmethod
    def extend(cls, bases: Tuple["LabelGroup", ...], cell_id: int, t: float) -> "LabelGroup":
        return cls(bases, (cell_id, t), sum(base.size for base in bases))

    def labels(self) -> Iterator[Label]:
        if self.event is None:
            yield ()
            return
        for base in self.bases:
            for label in base.labels():
                yield label + (self.event,)

    def __repr__(self) -> str:
        return f"LabelGroup(size={self.size}, event={self.event!r})"


@dataclass(frozen=True)
class SubBranch:
    """A labeled state component with its log measure along each pointer cell."""

    label: Label
    cell_measures: Mapping[int, float]
    component_id: int = 0

    @property
    def is_single_cell(self) -> bool:
        return len(self.cell_measures) == 1

    def measure(self, cell_id: int) -> float:
        return self.cell_measures.get(cell_id, LOG_ZERO)

    def total_measure(self) -> float:
        return math.fsum(math.exp(m) for m in self.cell_measures.values())


def split_sub_branch(sub: SubBranch, cell_id: int, t: float,
                     sp: SplitParameter) -> Tuple[SubBranch, SubBranch]:
    """The reduced splitting rule for a one-dimensional cell projector.

    Returns the new sub-branch, lying along ``cell_id`` only with ``Z`` of
    the in-cell measure and carrying the extended label, and the parent,
    which keeps its label and ``1 - Z`` of the in-cell measure.
    """
    if cell_id not in sub.cell_measures:
        raise DomainError(f"sub-branch has no measure along cell {cell_id}")
    m = sub.cell_measures[cell_id]
    created = SubBranch(sub.label + ((cell_id, t),), {cell_id: m + sp.log_z}, sub.component_id)
    remaining = dict(sub.cell_measures)
    remaining[cell_id] = m + sp.log_one_minus_z
    return created, SubBranch(sub.label, remaining, sub.component_id)


# -- literal vector oracle ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StateVectorToy:
    """State vector over ``(cell_id, label_index)`` basis states.

    ``labels`` is the label registry; index 0 is the initial label. The
    pointer operator of basis state i at time t is ``g * exp(t / tau)``
    times the projector onto i.
    """

    basis: Tuple[Tuple[int, int], ...]
    amplitudes: np.ndarray
    labels: Tuple[Label, ...]
    g: float
    tau: float = 1.0

    @classmethod
    def from_cells(cls, amplitudes: Mapping[int, complex], g: float,
                   tau: float = 1.0) -> "StateVectorToy":
        cells = sorted(amplitudes)
        vector = np.array([amplitudes[c] for c in cells], dtype=complex)
        return cls(tuple((c, 0) for c in cells), vector, ((),), g, tau)

    def index(self, cell_id: int, label_index: int) -> int:
        try:
            return self.basis.index((cell_id, label_index))
        except ValueError:
            raise DomainError(f"no basis state for cell {cell_id} label {label_index}") from None

    def norm(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def projector(self, cell_id: int, label_index: int, t: float) -> np.ndarray:
        i = self.index(cell_id, label_index)
        unit = np.zeros(len(self.basis), dtype=complex)
        unit[i] = 1.0
        return self.g * math.exp(t / self.tau) * np.outer(unit, unit.conj())

    def amplitude_map(self) -> Dict[Tuple[int, Label], complex]:
        return {(cell, self.labels[label]): complex(amp)
                for (cell, label), amp in zip(self.basis, self.amplitudes)}

    def label_measures(self) -> Dict[Label, Dict[int, float]]:
        """Measure along every cell for every label."""
        result: Dict[Label, Dict[int, float]] = {}
        for (cell, label), amp in zip(self.basis, self.amplitudes):
            result.setdefault(self.labels[label], {})[cell] = float(abs(amp) ** 2)
        return result


def apply_branch_vector(state: StateVectorToy, cell_id: int, t: float, sp: SplitParameter,
                        label_index: int = 0) -> StateVectorToy:
    """Apply the branching algorithm literally to the ``(cell_id, label_index)`` projection.

    Raises:
        DomainError: if the targeted projection carries no measure.
        PreconditionError: if its ``M`` is not at the threshold 1 at time t.
        InvariantError: if the norm is not preserved.
    """
    phi = state.amplitudes
    p_gamma = state.projector(cell_id, label_index, t)
    projected = p_gamma @ phi
    m_gamma = float(np.vdot(phi, projected).real)
    if m_gamma <= 0.0:
        raise DomainError(f"projection on cell {cell_id} label {label_index} has zero measure")
    if abs(m_gamma - 1.0) > _THRESHOLD_TOLERANCE:
        raise PreconditionError(f"M for cell {cell_id} label {label_index} is {m_gamma!r}, not 1")
    m_gamma_sq = float(np.vdot(projected, projected).real)

    new_label = state.labels[label_index] + ((cell_id, t),)
    labels = state.labels + (new_label,)
    basis = state.basis + ((cell_id, len(state.labels)),)
    size = len(basis)

    # C(t) moves the projected component onto the new label; P|phi> lies along one basis state.
    created = np.zeros(size, dtype=complex)
    created[size - 1] = projected[state.index(cell_id, label_index)]
    extended_phi = np.append(phi, 0.0)
    extended_projected = np.append(projected, 0.0)

    ratio = m_gamma / m_gamma_sq
    result = (math.sqrt(sp.z) * ratio * created
              + extended_phi - (1.0 - math.sqrt(1.0 - sp.z)) * ratio * extended_projected)

    before, after = state.norm(), float(np.vdot(result, result).real)
    if abs(after - before) > _NORM_TOLERANCE * max(before, 1.0):
        raise InvariantError(f"norm changed from {before!r} to {after!r}")
    return StateVectorToy(basis, result, labels, state.g, state.tau)


# -- exact engine ------------------------------------------------------------------


@dataclass(frozen=True)
class ExactSnapshot:
    """Immutable state of an exact run at one time.

    ``buckets`` maps ``(component_id, a, b, cell_id)`` to the number of
    sub-branches in the bucket and their label groups. Buckets with ``a == 0``
    of a component listed in ``residual_components`` are the per-cell pieces
    of that component's residual superposition, which is one sub-branch.
    """

    time: float
    buckets: Mapping[BucketKey, Tuple[int, Tuple[LabelGroup, ...]]]
    residual_components: FrozenSet[int]
    cell_m0: Mapping[Tuple[int, int], float]
    families: Mapping[int, int]
    sp: SplitParameter
    g: float
    tau: float
    events: int

    def is_residual(self, key: BucketKey) -> bool:
        return key[1] == 0 and key[0] in self.residual_components

    def log_measure(self, key: BucketKey) -> float:
        component_id, a, b, cell_id = key
        return self.cell_m0[(component_id, cell_id)] + a * self.sp.log_z + b * self.sp.log_one_minus_z

    @property
    def residual_count(self) -> int:
        return len(self.residual_components)

    @property
    def population(self) -> int:
        return sum(self.pure_counts().values()) + self.residual_count

    def pure_counts(self, grouping: Optional[Mapping[int, int]] = None) -> Dict[int, int]:
        """Labeled single-cell sub-branches per family."""
        grouping = self.families if grouping is None else grouping
        counts: Dict[int, int] = {}
        for key, (count, _) in self.buckets.items():
            if not self.is_residual(key):
                family = grouping[key[3]]
                counts[family] = counts.get(family, 0) + count
        return dict(sorted(counts.items()))

    def residual_families(self, component_id: int,
                          grouping: Optional[Mapping[int, int]] = None) -> Tuple[int, ...]:
        grouping = self.families if grouping is None else grouping
        return tuple(sorted({grouping[key[3]] for key in self.buckets
                             if key[0] == component_id and self.is_residual(key)}))

    def class_counts(self) -> Dict[ClassKey, int]:
        """Sub-branch counts per class, summed over cells."""
        counts: Dict[ClassKey, int] = {}
        for (component_id, a, b, _), (count, _) in self.buckets.items():
            key = ClassKey(component_id, a, b)
            counts[key] = counts.get(key, 0) + count
        return dict(sorted(counts.items()))

    def total_measure(self) -> float:
        """Total measure; a residual contributes all of its cells."""
        return math.fsum(count * math.exp(self.log_measure(key))
                         for key, (count, _) in self.buckets.items())

    def sub_branches(self) -> Iterator[SubBranch]:
        """Materialize every sub-branch, residual superpositions last."""
        residual_cells: Dict[int, Dict[int, float]] = {}
        for key in sorted(self.buckets):
            component_id, _, _, cell_id = key
            if self.is_residual(key):
                residual_cells.setdefault(component_id, {})[cell_id] = self.log_measure(key)
                continue
            measures = {cell_id: self.log_measure(key)}
            for group in self.buckets[key][1]:
                for label in group.labels():
                    yield SubBranch(label, measures, component_id)
        for component_id in sorted(residual_cells):
            yield SubBranch((), residual_cells[component_id], component_id)


class ExactEngine:
    """Exact labeled-sub-branch engine.

    ``order`` overrides the canonical order of events inside one
    simultaneity window; it exists to check that the order is unobservable.
    """

    def __init__(self, scenario: ScenarioConfig,
                 order: Optional[Callable[[BucketKey], object]] = None) -> None:
        self.scenario = scenario
        self.settings = scenario.settings
        self.sp = scenario.sp
        self.tau = scenario.tau
        self.g = scenario.resolved_g()
        self.time = -math.inf
        self.events = 0
        self.population = 0
        self._log_g = math.log(self.g)
        self._window = self.settings.simultaneity * self.tau
        self._order = order
        self._cell_m0: Dict[Tuple[int, int], float] = {}
        self._families: Dict[int, int] = {}
        self._buckets: Dict[BucketKey, List] = {}
        self._heap: List[Tuple[float, BucketKey]] = []
        self._residuals: set = set()

        for component_id, component in enumerate(scenario.components):
            root = LabelGroup.root()
            cells = [(cell.cell_id + offset, cell.m0, cell.family)
                     for cell in component.cells for offset in range(cell.multiplicity)]
            if len(cells) > 1:
                self._residuals.add(component_id)
            for cell_id, m0, family in cells:
                self._cell_m0[(component_id, cell_id)] = math.log(m0)
                self._families[cell_id] = family
                self._merge((component_id, 0, 0, cell_id), 1, (root,))
            self.population += 1
        self._check_capacity()

    def _time_of(self, key: BucketKey) -> float:
        component_id, a, b, cell_id = key
        m = self._cell_m0[(component_id, cell_id)] + a * self.sp.log_z + b * self.sp.log_one_minus_z
        return branch_time(m, self.g, self.tau)

    def _merge(self, key: BucketKey, count: int, groups: Tuple[LabelGroup, ...]) -> None:
        bucket = self._buckets.get(key)
        if bucket is None:
            self._buckets[key] = [count, groups]
            heapq.heappush(self._heap, (self._time_of(key), key))
        else:
            bucket[0] += count
            bucket[1] = bucket[1] + groups

    def _fire(self, key: BucketKey, t: float) -> None:
        count, groups = self._buckets.pop(key)
        component_id, a, b, cell_id = key
        self._merge((component_id, a + 1, b, cell_id), count,
                    (LabelGroup.extend(groups, cell_id, t),))
        self._merge((component_id, a, b + 1, cell_id), count, groups)
        self.population += count

    def _check_capacity(self) -> None:
        cap = self.settings.population_cap
        if self.population > cap:
            raise CapacityError(f"exact engine population {self.population} exceeds the cap of {cap} "
                                f"at t={self.time!r}; run the scenario in aggregated mode")

    @property
    def residual_count(self) -> int:
        return len(self._residuals)

    @property
    def next_event_time(self) -> Optional[float]:
        return self._heap[0][0] if self._heap else None

    @property
    def next_batch_growth(self) -> int:
        """Sub-branches the next batch of simultaneous events would add."""
        if not self._heap:
            return 0
        cutoff = self._heap[0][0] + self._window
        return sum(self._buckets[key][0] for t, key in self._heap if t <= cutoff)

    def step(self) -> Optional[float]:
        """Process the next batch of simultaneous events; return its time."""
        if not self._heap:
            return None
        batch_time = self._heap[0][0]
        batch = []
        while self._heap and self._heap[0][0] <= batch_time + self._window:
            batch.append(heapq.heappop(self._heap))
        batch.sort(key=lambda entry: entry[1] if self._order is None else self._order(entry[1]))
        for t, key in batch:
            self._fire(key, t)
        self.events += len(batch)
        self.time = batch_time
        logger.debug("t=%.17g: %d exact events, population %d", batch_time, len(batch),
                     self.population)
        self._check_capacity()
        return batch_time

    def advance(self, until: float) -> None:
        while self._heap and self._heap[0][0] <= until + self._window:
            self.step()
        self.time = max(self.time, until)

    def snapshot(self) -> ExactSnapshot:
        buckets = {key: (bucket[0], tuple(bucket[1])) for key, bucket in sorted(self._buckets.items())}
        return ExactSnapshot(self.time, MappingProxyType(buckets), frozenset(self._residuals),
                             MappingProxyType(dict(self._cell_m0)),
                             MappingProxyType(dict(self._families)), self.sp, self.g, self.tau,
                             self.events)


def _resolve_times(scenario: ScenarioConfig, horizon: Optional[float],
                   times: Optional[Sequence[float]]) -> Tuple[float, List[float]]:
    horizon = scenario.horizon if horizon is None else horizon
    if not horizon > 0.0:
        raise DomainError(f"horizon must be positive, got {horizon!r}")
    requested = scenario.sample_times if times is None else times
    chosen = sorted(t for t in requested if t <= horizon)
    if not chosen:
        chosen = [horizon]
    return horizon, chosen


def run_exact(scenario: ScenarioConfig, horizon: Optional[float] = None,
              snapshot_times: Optional[Sequence[float]] = None) -> List[ExactSnapshot]:
    """Run the exact engine and return a snapshot at every requested time.

    Raises:
        CapacityError: if the sub-branch population exceeds the configured cap.
    """
    horizon, times = _resolve_times(scenario, horizon, snapshot_times)
    engine = ExactEngine(scenario)
    started = _time.perf_counter()
    logger.info("exact run %r to t=%.6g (%d snapshots)", scenario.name, horizon, len(times))
    snapshots = []
    for t in times:
        engine.advance(t)
        snapshots.append(engine.snapshot())
    logger.info("exact run %r finished: %d events, population %d, %.3fs", scenario.name,
                engine.events, engine.population, _time.perf_counter() - started)
    return snapshots


# -- aggregated class table ---------------------------------------------------------


class ClassTable:
    """Aggregated counts of sub-branch classes of single-cell components.

    Counts are exact integers until one exceeds ``count_bits`` bits; the
    whole table then moves to log-domain counts.
    """

    def __init__(self, sp: SplitParameter, tau: float, g: float, m0: Sequence[float],
                 families: Sequence[int], count_bits: int = 256, time: float = 0.0) -> None:
        if len(m0) != len(families):
            raise DomainError("one family is needed per component")
        self.sp = sp
        self.tau = tau
        self.g = g
        self.m0 = tuple(m0)
        self.families = tuple(families)
        self.count_bits = count_bits
        self.time = time
        self.log_domain = False
        self._counts: Dict[Tuple[int, int, int], Union[int, float]] = {}

    @classmethod
    def from_scenario(cls, scenario: ScenarioConfig) -> "ClassTable":
        """Initial table; every component must lie along one (possibly repeated) cell.

        Raises:
            ModeError: for components spanning several cells.
        """
        m0, families, counts = [], [], []
        for component_id, component in enumerate(scenario.components):
            if not component.is_single_cell:
                raise ModeError(f"component {component_id} spans {len(component.cells)} cells; "
                                "aggregated mode needs single-cell components (use hybrid mode)")
            cell = component.cells[0]
            m0.append(math.log(cell.m0))
            families.append(cell.family)
            counts.append(cell.multiplicity)
        table = cls(scenario.sp, scenario.tau, scenario.resolved_g(), m0, families,
                    scenario.settings.count_bits, time=-math.inf)
        for component_id, count in enumerate(counts):
            table.add(ClassKey(component_id, 0, 0), BigCount.of(count, table.count_bits))
        return table

    @classmethod
    def from_exact(cls, snapshot: ExactSnapshot, count_bits: int = 256) -> "ClassTable":
        """Per-cell populations of an exact snapshot.

        Every ``(component, cell)`` pair becomes one aggregated component.
        Residual pieces become single-cell classes of count one, so the
        total measure is unchanged.
        """
        pairs = sorted({(key[0], key[3]) for key in snapshot.buckets})
        index = {pair: i for i, pair in enumerate(pairs)}
        table = cls(snapshot.sp, snapshot.tau, snapshot.g,
                    [snapshot.cell_m0[pair] for pair in pairs],
                    [snapshot.families[pair[1]] for pair in pairs], count_bits, snapshot.time)
        for key, (count, _) in snapshot.buckets.items():
            component_id, a, b, cell_id = key
            table.add(ClassKey(index[(component_id, cell_id)], a, b), BigCount.of(count, count_bits))
        return table

    def copy(self) -> "ClassTable":
        other = ClassTable(self.sp, self.tau, self.g, self.m0, self.families, self.count_bits,
                           self.time)
        other.log_domain = self.log_domain
        other._counts = dict(self._counts)
        return other

    def __len__(self) -> int:
        return len(self._counts)

    def __contains__(self, key: object) -> bool:
        return key in self._counts

    def keys(self) -> List[ClassKey]:
        return [ClassKey(*key) for key in sorted(self._counts)]

    def count(self, key: Tuple[int, int, int]) -> BigCount:
        try:
            raw = self._counts[key]
        except KeyError:
            raise DomainError(f"class {tuple(key)!r} is not in the table") from None
        return BigCount.from_log(raw) if self.log_domain else BigCount(exact=raw)

    def items(self) -> Iterator[Tuple[ClassKey, BigCount]]:
        for key in sorted(self._counts):
            yield ClassKey(*key), self.count(key)

    def exact_counts(self) -> Dict[ClassKey, int]:
        if self.log_domain:
            raise DomainError("table holds log-domain counts")
        return {ClassKey(*key): self._counts[key] for key in sorted(self._counts)}

    def to_log_domain(self) -> None:
        if not self.log_domain:
            self._counts = {key: math.log(n) for key, n in self._counts.items()}
            self.log_domain = True
            logger.info("class table switched to log-domain counts (%d classes)", len(self._counts))

    def add(self, key: Tuple[int, int, int], count: BigCount) -> None:
        key = tuple(key)
        if not count.is_exact:
            self.to_log_domain()
        if self.log_domain:
            value = count.log()
            old = self._counts.get(key)
            self._counts[key] = value if old is None else log_add(old, value)
            return
        value = self._counts.get(key, 0) + count.exact
        self._counts[key] = value
        if value.bit_length() > self.count_bits:
            self.to_log_domain()

    def pop(self, key: Tuple[int, int, int]) -> BigCount:
        found = self.count(key)
        del self._counts[tuple(key)]
        return found

    def log_count(self, key: Tuple[int, int, int]) -> float:
        raw = self._counts[key]
        return raw if self.log_domain else math.log(raw)

    def class_log_measure(self, key: Tuple[int, int, int]) -> LogMeasure:
        component_id, a, b = key
        return LogMeasure(self.m0[component_id] + a * self.sp.log_z + b * self.sp.log_one_minus_z)

    def class_time(self, key: Tuple[int, int, int]) -> float:
        return branch_time(self.class_log_measure(key), self.g, self.tau)

    def log_total_count(self, family: Optional[int] = None) -> float:
        return logsumexp_accumulate(self.log_count(key) for key in self._counts
                                    if family is None or self.families[key[0]] == family)

    def total_count(self, family: Optional[int] = None) -> BigCount:
        if self.log_domain:
            return BigCount.from_log(self.log_total_count(family))
        return BigCount(exact=sum(n for key, n in self._counts.items()
                                  if family is None or self.families[key[0]] == family))

    def log_total_measure(self) -> float:
        return logsumexp_accumulate(self.log_count(key) + self.class_log_measure(key)
                                    for key in self._counts)

    def total_measure(self) -> float:
        return math.exp(self.log_total_measure())


def apply_branch_reduced(table: ClassTable, key: Tuple[int, int, int], t: float) -> ClassTable:
    """Fire one class: its count moves to both children. Returns a new table.

    Raises:
        DomainError: if the class is absent.
        SchedulingError: if ``t`` is not the class's branch time.
    """
    key = ClassKey(*key)
    if key not in table:
        raise DomainError(f"class {tuple(key)!r} is not in the table")
    expected = table.class_time(key)
    if abs(t - expected) > 1e-9 * table.tau:
        raise SchedulingError(f"class {tuple(key)!r} branches at t={expected!r}, not t={t!r}")
    result = table.copy()
    count = result.pop(key)
    result.add(ClassKey(key.component_id, key.a + 1, key.b), count)
    result.add(ClassKey(key.component_id, key.a, key.b + 1), count)
    result.time = t
    return result


# -- aggregated engine ----------------------------------------------------------------


class _SeriesRecorder:
    """Collects the mean-measure series on a log-time grid.

    Per grid cell it keeps the largest value seen immediately before an
    event batch and the smallest value seen immediately after one, then the
    grid point itself. Rows are ``(t, ln<M>, <ln M> - stationary, alive, ln N)``.
    """

    def __init__(self, start: float, horizon: float, tau: float, samples_per_decade: int) -> None:
        k_low = int(math.floor(samples_per_decade * math.log10(_GRID_START)))
        k_high = int(math.floor(samples_per_decade * math.log10(horizon / tau) + 1e-9))
        points = [tau * 10.0 ** (k / samples_per_decade) for k in range(k_low, k_high + 1)]
        points = [p for p in points if start < p < horizon]
        points.append(horizon)
        self.points = points
        self.next_index = 0
        self.rows: List[Tuple[float, float, float, int, float]] = []
        self._high: Optional[Tuple[float, float, float, int, float]] = None
        self._low: Optional[Tuple[float, float, float, int, float]] = None

    @property
    def next_point(self) -> float:
        return self.points[self.next_index] if self.next_index < len(self.points) else math.inf

    def before(self, row: Tuple[float, float, float, int, float]) -> None:
        if self._high is None or row[1] > self._high[1]:
            self._high = row

    def after(self, row: Tuple[float, float, float, int, float]) -> None:
        if self._low is None or row[1] < self._low[1]:
            self._low = row

    def close_cell(self, grid_row: Tuple[float, float, float, int, float]) -> None:
        extremes = [row for row in (self._high, self._low) if row is not None]
        extremes.sort(key=lambda row: (row[0], -row[1]))
        self.rows.extend(extremes)
        self.rows.append(grid_row)
        self._high = self._low = None
        self.next_index += 1


@dataclass
class AggregatedRun:
    """Result of an aggregated (or hybrid) run."""

    samples: List[ClassTable]
    series: MeanSeries
    final: ClassTable
    events: int
    horizon: float
    handoff_time: Optional[float] = None


class AggregatedEngine:
    """Class-count engine for single-cell components."""

    def __init__(self, table: ClassTable, settings: Optional[EngineSettings] = None,
                 start_time: float = -math.inf) -> None:
        self.table = table
        self.settings = settings or EngineSettings()
        self.sp = table.sp
        self.tau = table.tau
        self.time = start_time
        self.events = 0
        self._window = self.settings.simultaneity * self.tau
        self._log_g = math.log(table.g)
        self._base = [m + self._log_g for m in table.m0]
        self._heap = [(table.class_time(key), tuple(key)) for key in table.keys()]
        heapq.heapify(self._heap)
        self.log_measure = table.log_total_measure()
        self._log_count = table.log_total_count()
        self._exact_count = None if table.log_domain else table.total_count().exact
        # count-weighted mean of the class log measures
        self._mean_log_measure = math.fsum(
            math.exp(table.log_count(key) - self._log_count) * table.class_log_measure(key)
            for key in table.keys())
        self._stationary_log_mean = stationary_log_mean(self.sp)

    @property
    def log_count(self) -> float:
        if self._exact_count is not None:
            return math.log(self._exact_count)
        return self._log_count

    def log_mean_measure(self, t: float) -> float:
        """ln <M>_C at time t with the current population."""
        return self._log_g + t / self.tau + self.log_measure - self.log_count

    def log_measure_deviation(self, t: float) -> float:
        """Count-weighted mean of ln M minus its stationary value."""
        return self._mean_log_measure + self._log_g + t / self.tau - self._stationary_log_mean

    def _row(self, t: float) -> Tuple[float, float, float, int, float]:
        return (t, self.log_mean_measure(t), self.log_measure_deviation(t), len(self.table),
                self.log_count)

    def check_conservation(self) -> None:
        measured = self.table.log_total_measure()
        drift = abs(math.expm1(measured - self.log_measure))
        if drift > self.settings.conservation_tolerance:
            raise InvariantError(f"total measure drifted by {drift:.3e} relative at t={self.time!r}")

    def _split_exact(self, key: Tuple[int, int, int]) -> None:
        counts = self.table._counts
        n = counts.pop(key)
        component_id, a, b = key
        overflow = False
        for child in ((component_id, a + 1, b), (component_id, a, b + 1)):
            old = counts.get(child)
            if old is None:
                counts[child] = n
                exponent = self._base[component_id] + child[1] * self.sp.log_z \
                    + child[2] * self.sp.log_one_minus_z
                heapq.heappush(self._heap, (-self.tau * exponent, child))
            else:
                merged = counts[child] = old + n
                overflow = overflow or merged.bit_length() > self.table.count_bits
        new_total = self._exact_count + n
        delta = self.table.class_log_measure(key) + self.sp.log_z + self.sp.log_one_minus_z
        self._mean_log_measure += n / new_total * (delta - self._mean_log_measure)
        self._exact_count = new_total
        if overflow:
            self._switch_to_log()

    def _split_log(self, key: Tuple[int, int, int]) -> None:
        counts = self.table._counts
        n = counts.pop(key)
        component_id, a, b = key
        for child in ((component_id, a + 1, b), (component_id, a, b + 1)):
            old = counts.get(child)
            if old is None:
                counts[child] = n
                exponent = self._base[component_id] + child[1] * self.sp.log_z \
                    + child[2] * self.sp.log_one_minus_z
                heapq.heappush(self._heap, (-self.tau * exponent, child))
            else:
                counts[child] = log_add(old, n)
        new_total = log_add(self._log_count, n)
        delta = self.table.class_log_measure(key) + self.sp.log_z + self.sp.log_one_minus_z
        self._mean_log_measure += math.exp(n - new_total) * (delta - self._mean_log_measure)
        self._log_count = new_total

    def _switch_to_log(self) -> None:
        self._log_count = math.log(self._exact_count)
        self._exact_count = None
        self.table.to_log_domain()

    def step(self) -> Optional[float]:
        """Process the next batch of simultaneous events; return its time."""
        heap = self._heap
        if not heap:
            return None
        batch_time = heap[0][0]
        if len(heap) > 1 and heap[1][0] <= batch_time + self._window or \
                len(heap) > 2 and heap[2][0] <= batch_time + self._window:
            batch = []
            while heap and heap[0][0] <= batch_time + self._window:
                batch.append(heapq.heappop(heap))
            batch.sort(key=lambda entry: entry[1])
        else:
            batch = [heapq.heappop(heap)]
        for _, key in batch:
            if self.table.log_domain:
                self._split_log(key)
            else:
                self._split_exact(key)
        self.events += len(batch)
        self.time = batch_time
        self.table.time = batch_time
        return batch_time

    def advance(self, until: float) -> None:
        while self._heap and self._heap[0][0] <= until + self._window:
            self.step()
        self.time = max(self.time, until)
        self.table.time = self.time

    def run(self, horizon: float, sample_times: Sequence[float] = (),
            progress: bool = False) -> Tuple[List[ClassTable], MeanSeries]:
        """Advance to ``horizon``, recording the mean series and table samples."""
        start = self.time if self.time > -math.inf else 0.0
        recorder = _SeriesRecorder(start, horizon, self.tau, self.settings.samples_per_decade)
        pending = sorted(t for t in sample_times if t <= horizon)
        samples: List[ClassTable] = []
        window = self._window
        heap = self._heap
        bar = tqdm(total=len(recorder.points), disable=not progress, file=sys.stderr,
                   desc="grid", unit="pt")
        try:
            while True:
                next_event = heap[0][0] if heap else math.inf
                next_point = recorder.next_point
                next_sample = pending[0] if pending else math.inf
                if next_point == math.inf and next_sample == math.inf:
                    break
                if next_sample <= next_point and next_event > next_sample + window:
                    self.advance(next_sample)
                    samples.append(self.table.copy())
                    pending.pop(0)
                    continue
                if next_event > next_point:
                    recorder.close_cell(self._row(next_point))
                    self.check_conservation()
                    bar.update(1)
                    continue
                recorder.before(self._row(next_event))
                self.step()
                recorder.after(self._row(self.time))
        finally:
            bar.close()
        self.time = max(self.time, horizon)
        self.table.time = self.time
        series = MeanSeries.from_rows(recorder.rows, self.tau, limiting_mean(self.sp))
        return samples, series


def run_aggregated(scenario: ScenarioConfig, horizon: Optional[float] = None,
                   sample_times: Optional[Sequence[float]] = None,
                   progress: bool = False) -> AggregatedRun:
    """Run the aggregated engine; sampled tables are copies taken at ``sample_times``.

    Raises:
        ModeError: for multi-cell components.
        InvariantError: if the total measure drifts beyond its tolerance.
    """
    horizon, times = _resolve_times(scenario, horizon, sample_times)
    table = ClassTable.from_scenario(scenario)
    engine = AggregatedEngine(table, scenario.settings)
    started = _time.perf_counter()
    logger.info("aggregated run %r to t=%.6g, %s", scenario.name, horizon, scenario.sp.describe())
    samples, series = engine.run(horizon, times, progress)
    logger.info("aggregated run %r finished: %d events, %d alive classes, %.3fs", scenario.name,
                engine.events, len(engine.table), _time.perf_counter() - started)
    return AggregatedRun(samples, series, engine.table, engine.events, horizon)


def run_hybrid(scenario: ScenarioConfig, horizon: Optional[float] = None,
               sample_times: Optional[Sequence[float]] = None,
               progress: bool = False) -> AggregatedRun:
    """Run exactly until residual superpositions are outnumbered, then aggregate.

    The hand-off happens once the residual share of the population falls
    below ``settings.residual_handoff``, once the next batch would take the
    population past ``settings.population_cap``, or at the horizon.
    """
    horizon, times = _resolve_times(scenario, horizon, sample_times)
    exact = ExactEngine(scenario)
    threshold = scenario.settings.residual_handoff
    cap = scenario.settings.population_cap
    samples: List[ClassTable] = []
    pending = list(times)
    while True:
        residual_share = exact.residual_count / exact.population
        next_event = exact.next_event_time
        if residual_share < threshold or next_event is None or next_event > horizon:
            break
        if exact.population + exact.next_batch_growth > cap:
            logger.info("hybrid run %r reached the population cap with residual share %.3g",
                        scenario.name, residual_share)
            break
        while pending and pending[0] < next_event:
            exact.advance(pending.pop(0))
            samples.append(ClassTable.from_exact(exact.snapshot(), scenario.settings.count_bits))
        exact.step()
    handoff = exact.time if exact.time > -math.inf else 0.0
    logger.info("hybrid run %r hands off at t=%.6g with population %d", scenario.name, handoff,
                exact.population)
    table = ClassTable.from_exact(exact.snapshot(), scenario.settings.count_bits)
    engine = AggregatedEngine(table, scenario.settings, start_time=handoff)
    engine.events = exact.events
    later, series = engine.run(horizon, pending, progress)
    return AggregatedRun(samples + later, series, engine.table, engine.events, horizon,
                         handoff_time=handoff)


def run(scenario: ScenarioConfig, progress: bool = False) -> Union[List[ExactSnapshot], AggregatedRun]:
    """Dispatch on the scenario's engine mode."""
    scenario.validate()
    if scenario.mode is EngineMode.EXACT:
        return run_exact(scenario)
    if scenario.mode is EngineMode.AGGREGATED:
        return run_aggregated(scenario, progress=progress)
    return run_hybrid(scenario, progress=progress)


# -- outcome counting ----------------------------------------------------------------


def outcome_counts(snapshot: Union[ExactSnapshot, ClassTable],
                   grouping: Optional[Mapping[int, int]] = None,
                   residual_policy: ResidualPolicy = ResidualPolicy.COUNT_AS_SPLIT
                   ) -> Dict[int, BigCount]:
    """Sub-branch counts per outcome family.

    ``grouping`` maps cell ids (exact snapshots) or component ids (class
    tables) to families and defaults to the families the run was built
    with. A residual superposition counts once in each family it spans
    under ``countAsSplit``, once under :data:`MIXED_FAMILY` under
    ``countAsOne``, and not at all under ``exclude``.
    """
    residual_policy = ResidualPolicy(residual_policy)
    if isinstance(snapshot, ClassTable):
        families = snapshot.families if grouping is None else grouping
        totals: Dict[int, BigCount] = {}
        for key, count in snapshot.items():
            family = families[key.component_id]
            totals[family] = totals[family].add(count, snapshot.count_bits) \
                if family in totals else count
        return dict(sorted(totals.items()))

    counts = snapshot.pure_counts(grouping)
    for component_id in sorted(snapshot.residual_components):
        spanned = snapshot.residual_families(component_id, grouping)
        if residual_policy is ResidualPolicy.COUNT_AS_SPLIT:
            targets: Iterable[int] = spanned
        elif residual_policy is ResidualPolicy.COUNT_AS_ONE:
            targets = spanned if len(spanned) == 1 else (MIXED_FAMILY,)
        else:
            targets = ()
        for family in targets:
            counts[family] = counts.get(family, 0) + 1
    return {family: BigCount(exact=n) for family, n in sorted(counts.items())}
