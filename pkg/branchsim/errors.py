"""Exception hierarchy shared by every branchsim module."""

from __future__ import annotations


class BranchSimError(Exception):
    """Base class of all branchsim failures."""


class DomainError(BranchSimError, ValueError):
    """An argument lies outside the domain of an operation."""


class PreconditionError(DomainError):
    """An operation was applied to a state that does not satisfy its precondition."""


class SchedulingError(BranchSimError):
    """The event schedule is inconsistent with the branch times it holds."""


class CapacityError(BranchSimError):
    """The exact engine would exceed its sub-branch population cap."""


class ModeError(BranchSimError):
    """A scenario cannot be run by the requested engine mode."""


class ConfigError(BranchSimError, ValueError):
    """A configuration document failed validation."""


class InvariantError(BranchSimError):
    """A conserved quantity drifted beyond its tolerance."""
