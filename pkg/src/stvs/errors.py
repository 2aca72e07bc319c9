"""Exception hierarchy shared by every stvs module."""

from __future__ import annotations


class StvsError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(StvsError, ValueError):
    """Input data failed validation.

    ``issues`` holds one ``(path, message)`` pair per problem so callers can
    report every offending field at once instead of failing on the first.
    """

    def __init__(self, issues, message=None):
        if isinstance(issues, str):
            issues = [("", issues)]
        self.issues = list(issues)
        if message is None:
            message = "; ".join(f"{p}: {m}" if p else m for p, m in self.issues)
        super().__init__(message)


class SingularNetworkError(StvsError):
    """The augmented admittance matrix could not be factorized."""

    def __init__(self, message, bus=None):
        self.bus = bus
        super().__init__(message)


class SolverError(StvsError):
    """Raised when a numerical routine cannot produce a usable result."""


class SimulationAborted(StvsError):
    """A time-domain run stopped early; ``snapshot`` is the last good state."""

    def __init__(self, message, time=None, snapshot=None):
        self.time = time
        self.snapshot = snapshot
        super().__init__(message)
