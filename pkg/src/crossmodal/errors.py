"""Exception types shared across the package.

ContractError maps to CLI exit code 2, NumericError to exit code 3.
"""


class ContractError(Exception):
    """A caller violated a documented precondition or interface contract."""


class DimensionError(ContractError):
    """Operand shapes do not conform."""


class NumericError(Exception):
    """A computation produced non-finite values."""
