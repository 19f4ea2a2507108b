"""
Scenario constructors and closed-form regime calculators.

Builders return validated :class:`~branchsim.config.ScenarioConfig` values
with the ``normalize-first-event`` convention unless stated otherwise.
Physical calculators work in SI units; :meth:`PhysicalParams.from_cgs`
converts the gram/centimetre values quoted for GRW-style models.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from .config import (HBAR, NORMALIZE_FIRST_EVENT, CellSpec, ComponentSpec, EngineMode,
                     EngineSettings, PhysicalParams, RateScaling, ScenarioConfig,
                     single_cell_components)
from .errors import DomainError
from .measure import BigCount, SplitParameter, branch_time, golden_split, make_split_parameter

logger = logging.getLogger(__name__)

FAMILY_A = 0
FAMILY_B = 1

GAUSSIAN_CUTOFF = 4.0  # shells extend to this many widths


def doubling_time(tau: float = 1.0) -> float:
    """T = tau ln 2, the time between paired events at Z = 1/2."""
    return tau * math.log(2.0)


def _half_split(sp: Optional[SplitParameter]) -> SplitParameter:
    return sp if sp is not None else make_split_parameter(0.5)


def _exact_settings(population: int) -> EngineSettings:
    return EngineSettings(population_cap=max(EngineSettings().population_cap, population))


# -- worked examples ---------------------------------------------------------------


def build_eq5(doublings: int = 3, tau: float = 1.0) -> ScenarioConfig:
    """Equal measure along A and B in one component; the first events fire together at t=0.

    Snapshot j (j = 1..doublings) is taken half a doubling time after the
    j-th round of events.
    """
    if doublings < 1:
        raise DomainError(f"doublings must be at least 1, got {doublings}")
    period = doubling_time(tau)
    times = tuple((j - 0.5) * period for j in range(1, doublings + 1))
    cells = (CellSpec(0, 0.5, FAMILY_A), CellSpec(1, 0.5, FAMILY_B))
    return ScenarioConfig(components=(ComponentSpec(cells),), sp=make_split_parameter(0.5),
                          tau=tau, g=2.0, mode=EngineMode.EXACT, horizon=times[-1],
                          sample_times=times, name="eq5",
                          settings=_exact_settings(2 ** (doublings + 2))).validate()


def build_eq6(doublings: int = 3, tau: float = 1.0) -> ScenarioConfig:
    """2/3 of the measure along A, 1/3 along B; only A fires at t=0.

    Snapshot j (j = 1..doublings) is taken half a doubling time after the
    j-th round following the first event.
    """
    if doublings < 1:
        raise DomainError(f"doublings must be at least 1, got {doublings}")
    period = doubling_time(tau)
    times = tuple((j + 0.5) * period for j in range(1, doublings + 1))
    cells = (CellSpec(0, 2.0 / 3.0, FAMILY_A), CellSpec(1, 1.0 / 3.0, FAMILY_B))
    return ScenarioConfig(components=(ComponentSpec(cells),), sp=make_split_parameter(0.5),
                          tau=tau, g=1.5, mode=EngineMode.EXACT, horizon=times[-1],
                          sample_times=times, name="eq6",
                          settings=_exact_settings(2 ** (doublings + 3))).validate()


def build_two_outcome(measure_a: float, measure_b: float, doublings: int = 8,
                      samples_per_doubling: int = 16, tau: float = 1.0) -> ScenarioConfig:
    """Z = 1/2 two-outcome superposition with an arbitrary measure split.

    When ``measure_a / measure_b`` is not a power of two the A and B events
    never synchronize and the count ratio oscillates within each period.
    """
    if abs(measure_a + measure_b - 1.0) > 1e-12 or min(measure_a, measure_b) <= 0.0:
        raise DomainError(f"measures must be positive and sum to 1, got {measure_a!r}, {measure_b!r}")
    period = doubling_time(tau)
    step = period / samples_per_doubling
    times = tuple((k + 0.5) * step for k in range(doublings * samples_per_doubling))
    cells = (CellSpec(0, measure_a, FAMILY_A), CellSpec(1, measure_b, FAMILY_B))
    return ScenarioConfig(components=(ComponentSpec(cells),), sp=make_split_parameter(0.5),
                          tau=tau, g=NORMALIZE_FIRST_EVENT, mode=EngineMode.EXACT,
                          horizon=times[-1], sample_times=times, name="two-outcome",
                          settings=_exact_settings(2 ** (doublings + 4))).validate()


def time_averaged_ratio(ratios: Sequence[float], periods: int, samples_per_period: int) -> float:
    """Mean of the last ``periods`` whole periods of a uniformly sampled ratio series."""
    tail = list(ratios)[-periods * samples_per_period:]
    if len(tail) < periods * samples_per_period:
        raise DomainError("ratio series is shorter than the requested averaging span")
    return float(np.mean(tail))


# -- Gaussian pair -------------------------------------------------------------------


def _uniform_cells(spread: float, measure: float, family: int, first_id: int) -> List[CellSpec]:
    count = int(round(spread ** 3))
    if count < 1:
        raise DomainError(f"family {family} covers no cells (spread {spread!r} cell widths)")
    return [CellSpec(first_id, measure / count, family, count)]


def _gaussian_cells(spread: float, measure: float, family: int, first_id: int,
                    shells: int) -> List[CellSpec]:
    """Radial shells of a 3-D Gaussian of width ``spread`` cells, out to the cutoff.

    Per-cell measures follow the continuous density so that families with
    the same shell layout differ by an exact scale factor; the multiplicity
    is the shell volume rounded to whole cells.
    """
    if spread <= 0.0 or shells < 1:
        raise DomainError(f"family {family} covers no cells (spread {spread!r}, {shells} shells)")
    edges = np.linspace(0.0, GAUSSIAN_CUTOFF, shells + 1)
    middles = 0.5 * (edges[1:] + edges[:-1])
    volumes = 4.0 / 3.0 * math.pi * (edges[1:] ** 3 - edges[:-1] ** 3)
    density = np.exp(-0.5 * middles ** 2)
    scale = measure / (spread ** 3 * float(np.dot(volumes, density)))
    cells, next_id = [], first_id
    for volume, rho in zip(volumes, density):
        count = max(1, int(round(volume * spread ** 3)))
        cells.append(CellSpec(next_id, float(rho * scale), family, count))
        next_id += count
    return cells


def build_gaussian_pair(width_a: float = 400.0, width_b: float = 100.0,
                        measure_a: float = 2.0 / 3.0, measure_b: float = 1.0 / 3.0,
                        w: float = 1.0, sp: Optional[SplitParameter] = None, tau: float = 1.0,
                        weights: str = "uniform", shells: int = 64,
                        rounds_after: float = 20.0) -> ScenarioConfig:
    """Two outcome families spread over ``(width / w)**3`` pointer cells each.

    ``weights="uniform"`` spreads each family's measure evenly over its
    cells; ``weights="gaussian"`` uses radial shells of a 3-D Gaussian.
    Every cell is its own single-cell component (aggregated mode). The
    horizon is half a doubling time past ``rounds_after`` doublings after
    the first A event.
    """
    sp = _half_split(sp)
    if abs(measure_a + measure_b - 1.0) > 1e-12 or min(measure_a, measure_b) <= 0.0:
        raise DomainError(f"measures must be positive and sum to 1, got {measure_a!r}, {measure_b!r}")
    if weights == "uniform":
        cells_a = _uniform_cells(width_a / w, measure_a, FAMILY_A, 0)
        first_b = cells_a[0].multiplicity
        cells_b = _uniform_cells(width_b / w, measure_b, FAMILY_B, first_b)
    elif weights == "gaussian":
        cells_a = _gaussian_cells(width_a / w, measure_a, FAMILY_A, 0, shells)
        first_b = cells_a[-1].cell_id + cells_a[-1].multiplicity
        cells_b = _gaussian_cells(width_b / w, measure_b, FAMILY_B, first_b, shells)
        # rounding the shell volumes moves the total slightly off 1
        total = math.fsum(c.m0 * c.multiplicity for c in cells_a + cells_b)
        cells_a = [CellSpec(c.cell_id, c.m0 / total, c.family, c.multiplicity) for c in cells_a]
        cells_b = [CellSpec(c.cell_id, c.m0 / total, c.family, c.multiplicity) for c in cells_b]
    else:
        raise DomainError(f"weights must be 'uniform' or 'gaussian', got {weights!r}")

    draft = ScenarioConfig(components=single_cell_components(cells_a + cells_b), sp=sp, tau=tau,
                           g=NORMALIZE_FIRST_EVENT, mode=EngineMode.AGGREGATED, horizon=1.0,
                           name=f"gaussian-pair-{weights}")
    first = family_first_event_times(draft)
    horizon = first[FAMILY_A] + (rounds_after + 0.5) * doubling_time(tau)
    return draft.with_overrides(horizon=horizon, sample_times=(horizon,)).validate()


def family_first_event_times(scenario: ScenarioConfig) -> Dict[int, float]:
    """Earliest branch time of any cell of each family."""
    g = scenario.resolved_g()
    first: Dict[int, float] = {}
    for component in scenario.components:
        for cell in component.cells:
            t = branch_time(math.log(cell.m0), g, scenario.tau)
            first[cell.family] = min(t, first.get(cell.family, math.inf))
    return dict(sorted(first.items()))


# -- golden-ratio run -------------------------------------------------------------------


def build_golden(horizon: float = 8000.0, components: int = 1, tau: float = 1.0,
                 samples_per_decade: int = 64,
                 settings: Optional[EngineSettings] = None) -> ScenarioConfig:
    """Aggregated run at the golden-ratio split.

    ``components`` single-cell components have log measures evenly spaced
    over one stationary support ``[ln Z', 0)``.
    """
    if components < 1:
        raise DomainError(f"components must be at least 1, got {components}")
    sp = golden_split()
    weights = [sp.z_prime ** (i / components) for i in range(components)]
    total = math.fsum(weights)
    cells = [CellSpec(i, weight / total, 0) for i, weight in enumerate(weights)]
    settings = settings or EngineSettings()
    settings = EngineSettings(**dict(settings.to_dict(), samples_per_decade=samples_per_decade))
    return ScenarioConfig(components=single_cell_components(cells), sp=sp, tau=tau,
                          g=NORMALIZE_FIRST_EVENT, mode=EngineMode.AGGREGATED, horizon=horizon,
                          name="golden", settings=settings).validate()


# -- single-particle spreading ----------------------------------------------------------


def spreading_time(p: PhysicalParams) -> float:
    """t0 = w**2 m / hbar."""
    return p.cell_width ** 2 * p.mass / p.hbar


def spreading_measure(t: float, p: PhysicalParams) -> float:
    """``exp(t/tau1) (1 + (t/t0)**2)**(-3/2) / 2`` for a packet spreading after an event."""
    t0 = spreading_time(p)
    return math.exp(t / p.tau1 - 1.5 * math.log1p((t / t0) ** 2) - math.log(2.0))


@dataclass(frozen=True)
class SpreadingDelay:
    t0: float
    next_branch_time: Optional[float]
    delay_factor: float
    root_ratio: Optional[float]
    cells_covered: float

    @property
    def rebranches(self) -> bool:
        return self.next_branch_time is not None


def spreading_delay(p: PhysicalParams, horizon_factor: float = 1e4) -> SpreadingDelay:
    """Delay until a spreading single-particle sub-branch branches again.

    ``delay_factor`` is the leading estimate ``3 ln(tau1 / t0)``; ``root_ratio``
    is the exact root of ``M(t) = 1`` in units of tau1, or None when there is
    no root before ``horizon_factor * tau1``.
    """
    p.validate()
    t0 = spreading_time(p)
    ratio = p.tau1 / t0
    if ratio < 1e3:
        logger.warning("tau1/t0 = %.3g is not large; the logarithmic delay estimate is unreliable",
                       ratio)

    def log_m(x: float) -> float:  # x = t / tau1
        return x - 1.5 * math.log1p((x * ratio) ** 2) - math.log(2.0)

    discriminant = 9.0 - 4.0 / ratio ** 2
    low = 0.0 if discriminant < 0.0 else (3.0 + math.sqrt(discriminant)) / 2.0
    delay_factor = 3.0 * math.log(ratio)
    cells = ratio ** 3
    if log_m(horizon_factor) < 0.0:
        logger.info("no re-branching before %.3g tau1", horizon_factor)
        return SpreadingDelay(t0, None, delay_factor, None, cells)
    root = brentq(log_m, low, horizon_factor, xtol=1e-13, rtol=4.0 * 2.0 ** -52, maxiter=500)
    return SpreadingDelay(t0, root * p.tau1, delay_factor, root, cells)


def tau_for_mass(p: PhysicalParams, mass: float) -> float:
    if not mass > 0.0:
        raise DomainError(f"mass must be positive, got {mass!r}")
    if p.rate_scaling is RateScaling.MASS_INDEPENDENT:
        return p.tau1
    return p.tau1 * p.reference_mass / mass


def mass_threshold(p: PhysicalParams) -> float:
    """Mass (kg) above which the growth time falls below the spreading time."""
    if p.rate_scaling is RateScaling.MASS_INDEPENDENT:
        return p.hbar * p.tau1 / p.cell_width ** 2
    return math.sqrt(p.hbar * p.tau1 * p.reference_mass) / p.cell_width


def branch_interval(p: PhysicalParams, mass: float) -> float:
    """Time between paired events, ``tau(m) ln 2``, for a particle of the given mass."""
    return doubling_time(tau_for_mass(p, mass))


def condition8_gaussian(tau_eff: float, t0: float) -> float:
    """``3 (tau_eff / t0)**2``; the growth dominates spreading when this is much below 1."""
    if not (tau_eff > 0.0 and t0 > 0.0):
        raise DomainError(f"tau_eff and t0 must be positive, got {tau_eff!r}, {t0!r}")
    return 3.0 * (tau_eff / t0) ** 2


def regime_report(p: PhysicalParams) -> Dict[str, Optional[float]]:
    """All regime numbers for one parameter point."""
    delay = spreading_delay(p)
    tau = tau_for_mass(p, p.mass)
    return {
        "mass_kg": p.mass,
        "width_m": p.cell_width,
        "t0_s": delay.t0,
        "next_branch_time_s": delay.next_branch_time,
        "delay_factor": delay.delay_factor,
        "root_ratio": delay.root_ratio,
        "cells_covered": delay.cells_covered,
        "threshold_mass_kg": mass_threshold(p),
        "branch_interval_s": branch_interval(p, p.mass),
        "condition8": condition8_gaussian(tau, delay.t0),
    }


# -- many particles ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MultiParticleStream:
    times: np.ndarray
    particles: np.ndarray
    mean_interval: float
    single_interval: float
    n: int

    @property
    def expected_interval(self) -> float:
        return self.single_interval / self.n


def multiparticle_stream(n: int, sp: SplitParameter, tau1: float, seed: int,
                         horizon: float) -> MultiParticleStream:
    """Merged event stream of n dephased single-particle clocks on one sub-branch.

    Initial log-measure phases are uniform over one cycle ``(ln Z', 0]``.
    After an event the followed sub-branch is either the new one (interval
    ``tau1 |ln Z|``) or the residual (``tau1 |ln(1-Z)|``), chosen by the
    seeded generator with equal weight, as every sub-branch counts once.
    """
    if n < 1:
        raise DomainError(f"particle count must be at least 1, got {n}")
    if not (tau1 > 0.0 and horizon > 0.0):
        raise DomainError(f"tau1 and horizon must be positive, got {tau1!r}, {horizon!r}")
    rng = np.random.Generator(np.random.PCG64(seed))
    cycle = -sp.log_z_prime
    first = rng.uniform(0.0, cycle, size=n) * tau1
    short = min(-sp.log_z, -sp.log_one_minus_z) * tau1
    steps = int(math.ceil(horizon / short)) + 1
    choice = rng.integers(0, 2, size=(n, steps - 1))
    intervals = np.where(choice == 1, -sp.log_z, -sp.log_one_minus_z) * tau1
    offsets = np.concatenate((np.zeros((n, 1)), np.cumsum(intervals, axis=1)), axis=1)
    times = first[:, None] + offsets
    particles = np.broadcast_to(np.arange(n)[:, None], times.shape)
    mask = times <= horizon
    times, particles = times[mask], particles[mask]
    order = np.lexsort((particles, times))
    times, particles = times[order], particles[order]
    mean_interval = float((times[-1] - times[0]) / (len(times) - 1)) if len(times) > 1 else math.nan
    single = -0.5 * (sp.log_z + sp.log_one_minus_z) * tau1
    logger.debug("%d clocks produced %d events before t=%.6g", n, len(times), horizon)
    return MultiParticleStream(times, particles, mean_interval, single, n)


# -- energy drift ------------------------------------------------------------------------------


def energy_drift_rate(epsilon: float, energies: Sequence[float],
                      counts: Optional[Sequence] = None, hbar: float = HBAR) -> float:
    """``epsilon * Var_C(H) / hbar`` with the variance weighted by sub-branch counts.

    ``counts`` may hold integers or :class:`BigCount` values; equal counts
    are assumed when it is omitted.
    """
    if not epsilon > 0.0:
        raise DomainError(f"epsilon must be positive, got {epsilon!r}")
    values = np.asarray(energies, dtype=float)
    if values.size == 0:
        raise DomainError("energy drift needs at least one sample")
    if counts is None:
        log_weights = np.zeros(values.size)
    else:
        log_weights = np.array([c.log() if isinstance(c, BigCount) else math.log(c)
                                for c in counts])
    weights = np.exp(log_weights - log_weights.max())
    mean = np.average(values, weights=weights)
    variance = float(np.average((values - mean) ** 2, weights=weights))
    return epsilon * variance / hbar
