"""Exception types raised across the package."""


class BiraError(Exception):
    """Base class for all package errors."""


class ShapeError(BiraError, ValueError):
    """Operand shapes are incompatible for the requested operation."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        listed = " vs ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {listed}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(BiraError, ArithmeticError):
    """An operation was evaluated outside its mathematical domain."""


class GeometryError(BiraError, ValueError):
    """Network geometry does not produce the configured feature shape."""

    def __init__(self, message, trace=()):
        self.trace = list(trace)
        if self.trace:
            message += "\n  shape trace:\n    " + "\n    ".join(self.trace)
        super().__init__(message)


class ConfigError(BiraError, ValueError):
    """A configuration violates one of its invariants."""


class GradientError(BiraError, RuntimeError):
    """Backward pass was requested on an invalid output or graph."""


class TrainingError(BiraError, RuntimeError):
    """Training hit a non-recoverable numerical condition."""
