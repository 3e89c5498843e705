"""Exception hierarchy shared across the package.

The CLI maps these to exit codes: InputError -> 2, ContractError -> 3,
NumericError -> 4.
"""


class HiercastError(Exception):
    """Base class for all package errors."""


class InputError(HiercastError):
    """Bad user-supplied data: unparseable files, missing series, bad paths."""


class ContractError(HiercastError):
    """A precondition or invariant of an operation was violated."""


class NumericError(HiercastError):
    """A numeric computation failed: non-finite values, indefinite matrices."""
