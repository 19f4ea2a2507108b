"""
Measure arithmetic for the anomalous branching model.

Every sub-branch measure descending from an initial component with measure
``m0`` has the form ``m0 * Z**a * (1 - Z)**b``. Measures are therefore
carried as natural logarithms keyed by the integer exponents ``(a, b)``;
floating values are derived from the keys and never used as keys.

Counts of sub-branches grow like ``2**(t / T)``, so :class:`BigCount` keeps
an exact integer while it fits a bit budget and falls back to the log
domain afterwards.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator, NamedTuple, NewType, Optional, Tuple

from scipy.optimize import brentq
from scipy.special import gammaln

from .errors import DomainError, PreconditionError

logger = logging.getLogger(__name__)

GOLDEN_RATIO = (1.0 + math.sqrt(5.0)) / 2.0

LOG_ZERO = float("-inf")
LOG_ONE = 0.0

DEFAULT_RATIO_TOLERANCE = 1e-9
DEFAULT_MAX_DENOMINATOR = 10**6
DEFAULT_COUNT_BITS = 256

# ln m + ln g values this close above zero are rounding, not a violated threshold.
_THRESHOLD_SLACK = 1e-12

LogMeasure = NewType("LogMeasure", float)
"""Natural log of a dimensionless measure; 0 is a full unit of measure."""


def log_measure(m: float) -> LogMeasure:
    """Wrap a plain measure in (0, 1] as a :data:`LogMeasure`."""
    if not m > 0.0:
        raise DomainError(f"measure must be positive, got {m!r}")
    return LogMeasure(math.log(m))


# -- split parameter ---------------------------------------------------------


def _continued_fraction(x: float, tolerance: float, max_denominator: int) -> Optional[Fraction]:
    """Return p/q if the expansion of x terminates within tolerance, else None.

    The expansion stops when a remainder falls below ``tolerance``; the
    convergent reached at that point is the detected ratio.
    """
    h_prev, h = 1, int(math.floor(x))
    k_prev, k = 0, 1
    rest = x - math.floor(x)
    while True:
        if rest <= tolerance or 1.0 - rest <= tolerance:
            if 1.0 - rest <= tolerance:
                # the remainder rounds up to the next integer
                h, k = h + h_prev, k + k_prev
            if abs(x - h / k) > tolerance:
                return None
            return Fraction(h, k)
        inverse = 1.0 / rest
        digit = int(math.floor(inverse))
        rest = inverse - digit
        h_prev, h = h, digit * h + h_prev
        k_prev, k = k, digit * k + k_prev
        if k > max_denominator:
            return None


@dataclass(frozen=True)
class SplitParameter:
    """The branching fraction Z together with its derived logarithms.

    ``ratio_class`` is the reduced fraction ``m/n`` approximating
    ``ln Z / ln(1 - Z)`` when the ratio is detected as rational, and
    ``None`` when it is treated as irrational.
    """

    z: float
    log_z: float
    log_one_minus_z: float
    ratio: float
    ratio_class: Optional[Fraction]

    @property
    def is_rational(self) -> bool:
        return self.ratio_class is not None

    @property
    def z_prime(self) -> float:
        """min(Z, 1 - Z), the lower edge of the stationary support."""
        return min(self.z, 1.0 - self.z)

    @property
    def log_z_prime(self) -> float:
        return min(self.log_z, self.log_one_minus_z)

    @property
    def ratio_label(self) -> str:
        if self.ratio_class is None:
            return "irrational"
        return f"rational({self.ratio_class.numerator},{self.ratio_class.denominator})"

    @property
    def lattice_steps(self) -> int:
        """Number of lattice steps spanned by ln Z' for a rational ratio."""
        if self.ratio_class is None:
            raise DomainError(f"split z={self.z!r} has an irrational log ratio")
        return max(self.ratio_class.numerator, self.ratio_class.denominator)

    def describe(self) -> str:
        return (f"Z={self.z:.12g} lnZ={self.log_z:.12g} ln(1-Z)={self.log_one_minus_z:.12g} "
                f"ratio={self.ratio:.12g} [{self.ratio_label}]")


def make_split_parameter(z: float,
                         ratio_tolerance: float = DEFAULT_RATIO_TOLERANCE,
                         max_denominator: int = DEFAULT_MAX_DENOMINATOR) -> SplitParameter:
    """Build a :class:`SplitParameter` and classify its log ratio.

    Raises:
        DomainError: if ``z`` is not strictly between 0 and 1.
    """
    if not (0.0 < z < 1.0) or math.isnan(z):
        raise DomainError(f"split parameter z must lie in (0, 1), got {z!r}")
    if not ratio_tolerance > 0.0:
        raise DomainError(f"ratio tolerance must be positive, got {ratio_tolerance!r}")
    log_z = math.log(z)
    log_one_minus_z = math.log1p(-z)
    ratio = log_z / log_one_minus_z
    ratio_class = _continued_fraction(ratio, ratio_tolerance, max_denominator)
    return SplitParameter(z, log_z, log_one_minus_z, ratio, ratio_class)


def golden_split(ratio_tolerance: float = DEFAULT_RATIO_TOLERANCE) -> SplitParameter:
    """Return the Z solving ln Z = phi * ln(1 - Z) with phi the golden ratio."""
    z = brentq(lambda x: math.log(x) - GOLDEN_RATIO * math.log1p(-x),
               0.3, 0.5, xtol=1e-16, rtol=4.0 * 2.0**-52, maxiter=200)
    return make_split_parameter(z, ratio_tolerance)


# -- classes and branch times --------------------------------------------------


class ClassKey(NamedTuple):
    """An aggregated sub-branch class: a Z-splits and b (1-Z)-splits of a component."""

    component_id: int
    a: int
    b: int


def class_measure(key: ClassKey, m0: float, sp: SplitParameter) -> LogMeasure:
    """Log measure ``m0 + a ln Z + b ln(1 - Z)`` of a class."""
    return LogMeasure(m0 + key.a * sp.log_z + key.b * sp.log_one_minus_z)


def branch_time(m: float, g: float, tau: float) -> float:
    """Time t* at which ``m * g * exp(t*/tau)`` reaches the threshold 1.

    Raises:
        DomainError: for non-positive ``g`` or ``tau``.
        PreconditionError: if the measure is already past the threshold.
    """
    if not (g > 0.0 and tau > 0.0):
        raise DomainError(f"g and tau must be positive, got g={g!r} tau={tau!r}")
    exponent = m + math.log(g)
    if exponent > _THRESHOLD_SLACK:
        raise PreconditionError(f"measure is already past threshold: ln m + ln g = {exponent!r}")
    if abs(exponent) <= _THRESHOLD_SLACK:
        exponent = 0.0
    return -tau * exponent + 0.0


def class_time(key: ClassKey, m0: float, g: float, sp: SplitParameter, tau: float) -> float:
    """Branch time of a class key."""
    return branch_time(class_measure(key, m0, sp), g, tau)


# -- log-domain sums -------------------------------------------------------------


def log_add(x: float, y: float) -> float:
    """ln(e**x + e**y) without leaving the log domain."""
    if x < y:
        x, y = y, x
    if y == LOG_ZERO:
        return x
    return x + math.log1p(math.exp(y - x))


class LogSumAccumulator:
    """Running log-sum-exp against the running maximum, with Kahan compensation."""

    __slots__ = ("maximum", "total", "compensation")

    def __init__(self) -> None:
        self.maximum = LOG_ZERO
        self.total = 0.0
        self.compensation = 0.0

    def add(self, x: float) -> None:
        if x == LOG_ZERO:
            return
        if x > self.maximum:
            if self.maximum != LOG_ZERO:
                scale = math.exp(self.maximum - x)
                self.total *= scale
                self.compensation *= scale
            self.maximum = x
        y = math.exp(x - self.maximum) - self.compensation
        t = self.total + y
        self.compensation = (t - self.total) - y
        self.total = t

    def value(self) -> float:
        if self.maximum == LOG_ZERO:
            return LOG_ZERO
        return self.maximum + math.log(self.total)


def logsumexp_accumulate(terms: Iterable[float]) -> float:
    """ln of the sum of exp(terms); an empty sequence gives :data:`LOG_ZERO`."""
    accumulator = LogSumAccumulator()
    for x in terms:
        accumulator.add(x)
    return accumulator.value()


# -- counts ----------------------------------------------------------------------


class BigCount:
    """A non-negative count held exactly or as its natural logarithm.

    Exact counts switch to the log domain once they exceed ``bit_budget``
    bits. Log-domain counts never switch back.
    """

    __slots__ = ("_exact", "_log")

    def __init__(self, exact: Optional[int] = None, log: Optional[float] = None) -> None:
        if (exact is None) == (log is None):
            raise DomainError("BigCount takes exactly one of exact= or log=")
        if exact is not None and exact < 0:
            raise DomainError(f"count must be non-negative, got {exact!r}")
        self._exact = exact
        self._log = log

    @classmethod
    def of(cls, value: int, bit_budget: int = DEFAULT_COUNT_BITS) -> "BigCount":
        return cls(exact=value)._fit(bit_budget)

    @classmethod
    def from_log(cls, value: float) -> "BigCount":
        return cls(log=value)

    @property
    def is_exact(self) -> bool:
        return self._exact is not None

    @property
    def exact(self) -> Optional[int]:
        return self._exact

    def log(self) -> float:
        if self._exact is None:
            return self._log
        if self._exact == 0:
            return LOG_ZERO
        return math.log(self._exact)

    def to_float(self) -> float:
        if self._exact is not None:
            return float(self._exact)
        return math.exp(self._log)

    def to_log_domain(self) -> "BigCount":
        return self if self._exact is None else BigCount(log=self.log())

    def _fit(self, bit_budget: int) -> "BigCount":
        if self._exact is not None and self._exact.bit_length() > bit_budget:
            return BigCount(log=math.log(self._exact))
        return self

    def add(self, other: "BigCount", bit_budget: int = DEFAULT_COUNT_BITS) -> "BigCount":
        if self._exact is not None and other._exact is not None:
            total = self._exact + other._exact
            if total.bit_length() > bit_budget:
                return BigCount(log=math.log(total))
            return BigCount(exact=total)
        return BigCount(log=log_add(self.log(), other.log()))

    def __add__(self, other: "BigCount") -> "BigCount":
        return self.add(other)

    def scaled(self, factor: int, bit_budget: int = DEFAULT_COUNT_BITS) -> "BigCount":
        if self._exact is not None:
            return BigCount(exact=self._exact * factor)._fit(bit_budget)
        return BigCount(log=self._log + math.log(factor))

    def isclose(self, other: "BigCount", rel_tol: float = 1e-12) -> bool:
        if self._exact is not None and other._exact is not None:
            return self._exact == other._exact
        a, b = self.log(), other.log()
        if a == b:
            return True
        return abs(a - b) <= rel_tol

    def __eq__(self, other: object) -> bool:
        if isinstance(other, BigCount):
            if self._exact is not None and other._exact is not None:
                return self._exact == other._exact
            return self.log() == other.log()
        if isinstance(other, int) and self._exact is not None:
            return self._exact == other
        return NotImplemented

    def __hash__(self) -> int:
        return hash(self._exact) if self._exact is not None else hash(self._log)

    def __repr__(self) -> str:
        if self._exact is not None:
            return f"BigCount({self._exact})"
        return f"BigCount(log={self._log!r})"

    def to_json(self):
        """Exact counts as decimal strings, log-domain counts as ``{"log": x}``."""
        if self._exact is not None:
            return str(self._exact)
        return {"log": self._log}


def count_ratio(numerator: BigCount, denominator: BigCount) -> float:
    """numerator / denominator as a float, exact where both counts are exact."""
    if numerator.is_exact and denominator.is_exact:
        if denominator.exact == 0:
            return math.inf if numerator.exact else math.nan
        return float(Fraction(numerator.exact, denominator.exact))
    return math.exp(numerator.log() - denominator.log())


def binomial_log(n: int, k: int) -> float:
    """ln C(n, k) for the log-domain comparison of class counts."""
    if k < 0 or k > n:
        return LOG_ZERO
    return float(gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1))


def iter_keys_below(component_id: int, sp: SplitParameter, budget: float) -> Iterator[ClassKey]:
    """All keys of a component whose log-measure drop ``a|lnZ| + b|ln(1-Z)|`` is at most budget."""
    alpha, beta = -sp.log_z, -sp.log_one_minus_z
    a = 0
    while a * alpha <= budget:
        b = 0
        while a * alpha + b * beta <= budget:
            yield ClassKey(component_id, a, b)
            b += 1
        a += 1


def split_pair(key: ClassKey) -> Tuple[ClassKey, ClassKey]:
    """Children of a class: the new Z sub-branch and the (1-Z) residual."""
    return (ClassKey(key.component_id, key.a + 1, key.b),
            ClassKey(key.component_id, key.a, key.b + 1))
