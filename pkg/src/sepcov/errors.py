"""Exception hierarchy shared by the numerical modules and the CLI."""

from __future__ import annotations


class SepCovError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class ModelError(SepCovError, ValueError):
    """Invalid atoms, weights or dimensions."""


class SingularKernelError(SepCovError, ZeroDivisionError):
    """Evaluation point sits on (or numerically at) a pole ``1 + t*alpha = 0``."""

    def __init__(self, message: str, atom: float | None = None):
        super().__init__(message)
        self.atom = atom


class DomainError(SepCovError, ValueError):
    """Spectral parameter outside the upper half plane, or similar."""


class ConvergenceError(SepCovError, RuntimeError):
    """Fixed-point / Newton solve did not reach tolerance.

    Carries the last iterate so callers can inspect or restart from it.
    """

    def __init__(self, message: str, last=None, residual: float = float("nan")):
        super().__init__(message)
        self.last = last
        self.residual = residual


class BracketError(SepCovError, ValueError):
    """Root bracket without a sign change."""


class EdgeSearchError(SepCovError, RuntimeError):
    def __init__(self, message: str, scan=None):
        super().__init__(message)
        self.scan = scan


class DegenerateEdgeError(SepCovError, ArithmeticError):
    pass


class QuantileExhaustedError(SepCovError, RuntimeError):
    pass


class BatchError(SepCovError, RuntimeError):
    def __init__(self, message: str, failed: list[int] | None = None):
        super().__init__(message)
        self.failed = failed or []


class SingularPiError(SepCovError, ZeroDivisionError):
    """``1 + m*sigma`` vanishes for some atom, so the deterministic limit blows up."""


class PreconditionError(SepCovError, ValueError):
    pass
