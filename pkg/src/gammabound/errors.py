"""Exception hierarchy shared by every gammabound module."""

from __future__ import annotations


class GammaboundError(Exception):
    """Base class for all library errors."""


class SchemaError(GammaboundError):
    """Dataset violates its record-shape or value invariants."""


class EmptyDataset(GammaboundError):
    pass


class EmptyResult(GammaboundError):
    """A filtering step removed every record."""


class MissingStudyIndicator(GammaboundError):
    pass


class SingleStudy(GammaboundError):
    pass


class SingleArm(GammaboundError):
    """All treatment indicators are equal, so a propensity cannot be fit."""


class NoConvergence(GammaboundError):
    def __init__(self, message: str, grad_norm: float = float("nan")):
        super().__init__(f"{message} (final gradient inf-norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


class TooFewRecords(GammaboundError):
    pass


class NonBinaryOutcome(GammaboundError):
    pass


class FoldDegenerate(GammaboundError):
    """A cross-fitting training complement lacks one treatment arm."""


class EmptyArm(GammaboundError):
    pass


class LpInfeasible(GammaboundError):
    """Signals a solver bug: the sensitivity programs are always feasible."""


class MissingNuisance(GammaboundError):
    pass


class EmptyTarget(GammaboundError):
    pass


class DomainError(GammaboundError, ValueError):
    pass


class ZeroVariance(GammaboundError):
    pass


class DegenerateQuantile(GammaboundError):
    pass


class IoError(GammaboundError):
    """A file could not be read or written; the message names the path."""
