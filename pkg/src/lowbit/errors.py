"""Shared exception types.

UsageError marks caller mistakes (bad arguments, malformed configs); the
CLI maps it to exit code 2. Everything else that escapes maps to exit 1.
"""


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class UsageError(ValueError):
    """The operation was invoked with invalid arguments or state."""
