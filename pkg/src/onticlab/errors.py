"""Exception hierarchy shared across the package."""

from __future__ import annotations


class OnticLabError(Exception):
    """Base class for every error raised by onticlab."""


class ValidationError(OnticLabError, ValueError):
    """An input violates a documented invariant."""


class ShapeMismatchError(ValidationError):
    pass


class NotAProjectorError(ValidationError):
    pass


class RuleConflictError(ValidationError):
    """Two rules of a structured unitary claim the same basis vector."""


class TagError(OnticLabError, LookupError):
    """A tag does not resolve to a quantum object or model component."""


class PreconditionError(OnticLabError):
    pass


class ParameterIndependenceError(PreconditionError):
    def __init__(self, message: str, rung: str, defect: float):
        super().__init__(message)
        self.rung = rung
        self.defect = defect


class OracleMismatchError(OnticLabError, ArithmeticError):
    """A closed form disagrees with the brute-force Born-rule evaluation."""

    def __init__(self, message: str, closed_form: float, oracle: float):
        super().__init__(message)
        self.closed_form = closed_form
        self.oracle = oracle


class ResourceError(OnticLabError):
    """A computation would exceed a configured size cap.

    ``required`` carries the offending size (a dimension, a support size or a
    decimal digit count) so callers can report it.
    """

    def __init__(self, message: str, required: float | int | None = None):
        super().__init__(message)
        self.required = required


class ModelSchemaError(ValidationError):
    """A model document failed validation; ``pointer`` is a JSON pointer."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer
