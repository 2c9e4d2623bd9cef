"""Error families raised across the lab.

Each family carries the process exit code the CLI maps it to.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Any, ClassVar

if TYPE_CHECKING:
    from utils.solver import Solution


class LabError(Exception):
    """Base class for every error the lab raises on purpose."""

    exit_code: ClassVar[int] = 1

    def __init__(self, message: str = "Unexpected lab failure."):
        super().__init__(message)


class ConfigError(LabError):
    """Configuration could not be parsed or failed validation."""

    exit_code: ClassVar[int] = 2

    def __init__(self, message: str = "Invalid configuration.", key: str | None = None):
        self.key = key
        super().__init__(message)


class DomainError(LabError, ValueError):
    """An argument lies outside the domain where the quantity is defined."""

    exit_code: ClassVar[int] = 3

    def __init__(self, message: str = "Argument outside the admissible domain."):
        super().__init__(message)


class UndefinedHessianError(DomainError):
    def __init__(
        self,
        message: str = "Hessian undefined at zero strain for p < 2 and mu = 0.",
    ):
        super().__init__(message)


class UnsupportedLemmaError(DomainError):
    def __init__(self, lemma_id: str = ""):
        self.lemma_id = lemma_id
        super().__init__(f"Unsupported audit id: {lemma_id!r}")


class MeshError(LabError):
    exit_code: ClassVar[int] = 4

    def __init__(self, message: str = "Invalid mesh operation."):
        super().__init__(message)


class BadDomainError(MeshError):
    def __init__(self, message: str = "Degenerate box domain."):
        super().__init__(message)


class MeshMismatchError(MeshError):
    def __init__(self, message: str = "Field does not live on the problem mesh."):
        super().__init__(message)


class BadStepError(MeshError):
    def __init__(self, message: str = "Step is not a multiple of the mesh spacing."):
        super().__init__(message)


class BallTooSmallError(MeshError):
    def __init__(self, message: str = "Ball radius below the resolution guard."):
        super().__init__(message)


class BallOutsideDomainError(MeshError):
    def __init__(self, message: str = "Ball closure leaves the box interior."):
        super().__init__(message)


class SolverError(LabError):
    exit_code: ClassVar[int] = 5

    def __init__(self, message: str = "Minimization failed."):
        super().__init__(message)


class LineSearchStalledError(SolverError):
    def __init__(
        self,
        message: str = "Line search found no decrease; the Newton direction is not a descent direction.",
    ):
        super().__init__(message)


class MaxItersError(SolverError):
    """Iteration budget exhausted. The partial solution is kept on the error."""

    def __init__(
        self,
        message: str = "Iteration limit reached before convergence.",
        solution: Solution | None = None,
    ):
        self.solution = solution
        super().__init__(message)


class IndefiniteTangentError(SolverError):
    def __init__(self, message: str = "Tangent tensor is not positive definite."):
        super().__init__(message)


class LinearSolveError(SolverError):
    def __init__(self, message: str = "Sparse linear solve did not converge."):
        super().__init__(message)


class DiagnosticError(LabError):
    exit_code: ClassVar[int] = 6

    def __init__(self, message: str = "Diagnostic could not be evaluated."):
        super().__init__(message)


class MinimalityViolationError(DiagnosticError):
    def __init__(self, gap: float = float("nan")):
        self.gap = gap
        super().__init__(f"Comparison field has larger energy than u: gap {gap:.3e}")


class DecayFitError(DiagnosticError):
    def __init__(self, message: str = "Decay fit needs at least three radii."):
        super().__init__(message)


class AuditViolationError(LabError):
    """A hard audit bound failed. Carries the offending audit ids."""

    exit_code: ClassVar[int] = 7

    def __init__(self, lemma_ids: list[str] | None = None, witness: Any = None):
        self.lemma_ids = lemma_ids or []
        self.witness = witness
        super().__init__(f"Hard audit bounds violated: {', '.join(self.lemma_ids)}")
