"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: UsageError -> 1, DataError -> 2,
ContractError -> 3.
"""


class SubnetParseError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class UsageError(SubnetParseError):
    """Caller violated a documented precondition (bad argument, empty input)."""

    exit_code = 1


class DataError(SubnetParseError):
    """Malformed input data (CoNLL-U files, vector tables, mask files)."""

    exit_code = 2


class ContractError(SubnetParseError):
    """Internal invariant or shape contract violated."""

    exit_code = 3
