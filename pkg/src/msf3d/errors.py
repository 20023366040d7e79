"""Exception hierarchy shared by the library and the CLI.

The CLI maps these onto process exit codes: InputError -> 1,
ContractViolation -> 2, NumericError -> 3.
"""


class MSF3DError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class InputError(MSF3DError, ValueError):
    """Malformed or unsupported user input (files, labels, config keys)."""

    exit_code = 1


class ContractViolation(MSF3DError, AssertionError):
    """A precondition of an operation was not met by the caller."""

    exit_code = 2


class DimensionError(ContractViolation):
    """Operand shapes are incompatible."""


class NumericError(MSF3DError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    exit_code = 3
