"""
Declarative scenario and physical-parameter configuration.

Every dataclass here round-trips through JSON with ``to_dict`` /
``from_dict``; field names in the JSON documents mirror the attribute
names. ``validate`` raises :class:`~branchsim.errors.ConfigError`.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .errors import ConfigError, DomainError
from .measure import (DEFAULT_COUNT_BITS, DEFAULT_MAX_DENOMINATOR, DEFAULT_RATIO_TOLERANCE,
                      SplitParameter, make_split_parameter)

HBAR = 1.054571817e-34  # J s
PROTON_MASS = 1.67262192e-27  # kg
GRW_RATE = 1e-16  # 1/s
GRW_WIDTH = 1e-7  # m

NORMALIZE_FIRST_EVENT = "normalize-first-event"

THREADS_ENV = "BRANCHSIM_THREADS"

_MEASURE_TOLERANCE = 1e-12


class EngineMode(str, enum.Enum):
    EXACT = "exact"
    AGGREGATED = "aggregated"
    HYBRID = "hybrid"


class ResidualPolicy(str, enum.Enum):
    """How a residual superposition spanning several outcomes is counted."""

    COUNT_AS_SPLIT = "countAsSplit"
    COUNT_AS_ONE = "countAsOne"
    EXCLUDE = "exclude"


class RateScaling(str, enum.Enum):
    MASS_INDEPENDENT = "massIndependent"
    PROPORTIONAL_TO_MASS = "proportionalToMass"


def _enum_value(kind, value, name):
    try:
        return kind(value)
    except ValueError:
        choices = ", ".join(member.value for member in kind)
        raise ConfigError(f"{name} must be one of {choices}, got {value!r}") from None


@dataclass(frozen=True)
class CellSpec:
    """Initial measure on one pointer cell.

    ``multiplicity`` declares that many independent copies of the cell
    (consecutive cell ids starting at ``cell_id``), each with measure ``m0``.
    """

    cell_id: int
    m0: float
    family: int = 0
    multiplicity: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return {"cell_id": self.cell_id, "m0": self.m0, "family": self.family,
                "multiplicity": self.multiplicity}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CellSpec":
        try:
            return cls(int(data["cell_id"]), float(data["m0"]), int(data.get("family", 0)),
                       int(data.get("multiplicity", 1)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed cell entry {data!r}: {exc}") from None


@dataclass(frozen=True)
class ComponentSpec:
    """One initial state component (a single sub-branch) and the cells it lies along."""

    cells: Tuple[CellSpec, ...]

    @property
    def is_single_cell(self) -> bool:
        return len(self.cells) == 1

    @property
    def families(self) -> Tuple[int, ...]:
        return tuple(sorted({cell.family for cell in self.cells}))

    @property
    def total_measure(self) -> float:
        return math.fsum(cell.m0 * cell.multiplicity for cell in self.cells)

    def to_dict(self) -> Dict[str, Any]:
        return {"cells": [cell.to_dict() for cell in self.cells]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ComponentSpec":
        try:
            cells = data["cells"]
        except (KeyError, TypeError):
            raise ConfigError(f"component entry needs a 'cells' list, got {data!r}") from None
        return cls(tuple(CellSpec.from_dict(cell) for cell in cells))


@dataclass(frozen=True)
class EngineSettings:
    population_cap: int = 10**6
    count_bits: int = DEFAULT_COUNT_BITS
    ratio_tolerance: float = DEFAULT_RATIO_TOLERANCE
    max_denominator: int = DEFAULT_MAX_DENOMINATOR
    residual_handoff: float = 2.0**-20
    samples_per_decade: int = 64
    simultaneity: float = 1e-12  # in units of tau
    conservation_tolerance: float = 1e-9

    def to_dict(self) -> Dict[str, Any]:
        return {"population_cap": self.population_cap, "count_bits": self.count_bits,
                "ratio_tolerance": self.ratio_tolerance, "max_denominator": self.max_denominator,
                "residual_handoff": self.residual_handoff,
                "samples_per_decade": self.samples_per_decade,
                "simultaneity": self.simultaneity,
                "conservation_tolerance": self.conservation_tolerance}

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "EngineSettings":
        if not data:
            return cls()
        known = cls().to_dict()
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown engine settings: {', '.join(sorted(unknown))}")
        merged = dict(known, **data)
        try:
            return cls(int(merged["population_cap"]), int(merged["count_bits"]),
                       float(merged["ratio_tolerance"]), int(merged["max_denominator"]),
                       float(merged["residual_handoff"]), int(merged["samples_per_decade"]),
                       float(merged["simultaneity"]), float(merged["conservation_tolerance"]))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed engine settings: {exc}") from None

    def validate(self) -> "EngineSettings":
        if self.population_cap < 1:
            raise ConfigError(f"population_cap must be positive, got {self.population_cap}")
        if self.count_bits < 8:
            raise ConfigError(f"count_bits must be at least 8, got {self.count_bits}")
        if self.samples_per_decade < 1:
            raise ConfigError(f"samples_per_decade must be positive, got {self.samples_per_decade}")
        if not 0.0 < self.residual_handoff < 1.0:
            raise ConfigError(f"residual_handoff must lie in (0, 1), got {self.residual_handoff}")
        return self


GValue = Union[float, str]


@dataclass(frozen=True)
class ScenarioConfig:
    """A declarative scenario: initial components, split, growth time and run window."""

    components: Tuple[ComponentSpec, ...]
    sp: SplitParameter
    tau: float = 1.0
    g: GValue = NORMALIZE_FIRST_EVENT
    mode: EngineMode = EngineMode.EXACT
    residual_policy: ResidualPolicy = ResidualPolicy.COUNT_AS_SPLIT
    horizon: float = 10.0
    sample_times: Tuple[float, ...] = ()
    seed: int = 0
    name: str = "custom"
    settings: EngineSettings = field(default_factory=EngineSettings)

    @property
    def total_measure(self) -> float:
        return math.fsum(component.total_measure for component in self.components)

    def resolved_g(self) -> float:
        """The numeric g; ``normalize-first-event`` puts the first event at t=0."""
        if isinstance(self.g, str):
            largest = max(cell.m0 for component in self.components for cell in component.cells)
            return 1.0 / largest
        return float(self.g)

    def cell_families(self) -> Dict[int, int]:
        """Family of every expanded cell id."""
        families: Dict[int, int] = {}
        for component in self.components:
            for cell in component.cells:
                for offset in range(cell.multiplicity):
                    families[cell.cell_id + offset] = cell.family
        return families

    @property
    def families(self) -> Tuple[int, ...]:
        return tuple(sorted({cell.family for c in self.components for cell in c.cells}))

    def validate(self) -> "ScenarioConfig":
        if not self.components:
            raise ConfigError("scenario has no components")
        spans = []
        for component in self.components:
            if not component.cells:
                raise ConfigError("component has no cells")
            for cell in component.cells:
                if not cell.m0 > 0.0 or cell.m0 > 1.0:
                    raise ConfigError(f"cell {cell.cell_id} has m0={cell.m0!r} outside (0, 1]")
                if cell.multiplicity < 1:
                    raise ConfigError(f"cell {cell.cell_id} has multiplicity {cell.multiplicity}")
                spans.append((cell.cell_id, cell.cell_id + cell.multiplicity))
        spans.sort()
        for (_, end), (start, _) in zip(spans, spans[1:]):
            if start < end:
                raise ConfigError(f"cell ids overlap at cell {start}")
        total = self.total_measure
        if abs(total - 1.0) > _MEASURE_TOLERANCE:
            raise ConfigError(f"total initial measure must be 1, got {total!r}")
        if not self.tau > 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau!r}")
        if not self.horizon > 0.0:
            raise ConfigError(f"horizon must be positive, got {self.horizon!r}")
        if isinstance(self.g, str):
            if self.g != NORMALIZE_FIRST_EVENT:
                raise ConfigError(f"g must be a number or {NORMALIZE_FIRST_EVENT!r}, got {self.g!r}")
        elif not self.g > 0.0:
            raise ConfigError(f"g must be positive, got {self.g!r}")
        g = self.resolved_g()
        for component in self.components:
            for cell in component.cells:
                if math.log(cell.m0) + math.log(g) > 1e-12:
                    raise ConfigError(f"cell {cell.cell_id} starts past threshold (m0*g > 1)")
        if any(t < 0.0 for t in self.sample_times):
            raise ConfigError("sample times must be non-negative")
        self.settings.validate()
        return self

    def with_overrides(self, **changes: Any) -> "ScenarioConfig":
        return replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "components": [component.to_dict() for component in self.components],
            "z": self.sp.z,
            "tau": self.tau,
            "g": self.g,
            "mode": self.mode.value,
            "residual_policy": self.residual_policy.value,
            "horizon": self.horizon,
            "sample_times": list(self.sample_times),
            "seed": self.seed,
            "settings": self.settings.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"scenario document must be an object, got {type(data).__name__}")
        settings = EngineSettings.from_dict(data.get("settings"))
        try:
            sp = make_split_parameter(float(data["z"]), settings.ratio_tolerance,
                                      settings.max_denominator)
        except KeyError:
            raise ConfigError("scenario document needs a 'z' field") from None
        except (DomainError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid split parameter: {exc}") from None
        g = data.get("g", NORMALIZE_FIRST_EVENT)
        if not isinstance(g, str):
            try:
                g = float(g)
            except (TypeError, ValueError):
                raise ConfigError(f"g must be a number or {NORMALIZE_FIRST_EVENT!r}, "
                                  f"got {g!r}") from None
        try:
            config = cls(
                components=tuple(ComponentSpec.from_dict(c) for c in data.get("components", ())),
                sp=sp,
                tau=float(data.get("tau", 1.0)),
                g=g,
                mode=_enum_value(EngineMode, data.get("mode", "exact"), "mode"),
                residual_policy=_enum_value(ResidualPolicy,
                                            data.get("residual_policy", "countAsSplit"),
                                            "residual_policy"),
                horizon=float(data.get("horizon", 10.0)),
                sample_times=tuple(float(t) for t in data.get("sample_times", ())),
                seed=int(data.get("seed", 0)),
                name=str(data.get("name", "custom")),
                settings=settings,
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed scenario document: {exc}") from None
        return config.validate()


@dataclass(frozen=True)
class PhysicalParams:
    """SI parameters of a GRW-style pointer model for one particle species."""

    mass: float = PROTON_MASS
    cell_width: float = GRW_WIDTH
    rate: float = GRW_RATE
    hbar: float = HBAR
    rate_scaling: RateScaling = RateScaling.MASS_INDEPENDENT
    epsilon: float = 1e-45
    reference_mass: float = PROTON_MASS
    epsilon_range: Tuple[float, float] = (1e-50, 1e-40)

    @property
    def tau1(self) -> float:
        return 1.0 / self.rate

    @classmethod
    def from_cgs(cls, mass_g: float, width_cm: float, **kwargs: Any) -> "PhysicalParams":
        return cls(mass=mass_g * 1e-3, cell_width=width_cm * 1e-2, **kwargs).validate()

    def validate(self) -> "PhysicalParams":
        for name in ("mass", "cell_width", "rate", "hbar", "epsilon", "reference_mass"):
            value = getattr(self, name)
            if not value > 0.0 or math.isinf(value):
                raise ConfigError(f"{name} must be positive and finite, got {value!r}")
        low, high = self.epsilon_range
        if not low <= self.epsilon <= high:
            raise ConfigError(f"epsilon={self.epsilon!r} outside the configured range [{low!r}, {high!r}]")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {"mass": self.mass, "cell_width": self.cell_width, "rate": self.rate,
                "hbar": self.hbar, "rate_scaling": self.rate_scaling.value,
                "epsilon": self.epsilon, "reference_mass": self.reference_mass,
                "epsilon_range": list(self.epsilon_range)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PhysicalParams":
        defaults = cls()
        try:
            return cls(
                mass=float(data.get("mass", defaults.mass)),
                cell_width=float(data.get("cell_width", defaults.cell_width)),
                rate=float(data.get("rate", defaults.rate)),
                hbar=float(data.get("hbar", defaults.hbar)),
                rate_scaling=_enum_value(RateScaling, data.get("rate_scaling",
                                                               defaults.rate_scaling.value),
                                         "rate_scaling"),
                epsilon=float(data.get("epsilon", defaults.epsilon)),
                reference_mass=float(data.get("reference_mass", defaults.reference_mass)),
                epsilon_range=tuple(data.get("epsilon_range", defaults.epsilon_range)),
            ).validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed physical parameters: {exc}") from None


def worker_count(requested: Optional[int] = None) -> int:
    """Worker pool size: explicit request, then BRANCHSIM_THREADS, then the CPU count."""
    if requested is not None:
        if requested < 1:
            raise ConfigError(f"worker count must be positive, got {requested}")
        return requested
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        if value < 1:
            raise ConfigError(f"{THREADS_ENV} must be positive, got {value}")
        return value
    return os.cpu_count() or 1


def single_cell_components(cells: Sequence[CellSpec]) -> Tuple[ComponentSpec, ...]:
    return tuple(ComponentSpec((cell,)) for cell in cells)
