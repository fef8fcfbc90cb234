"""Exception hierarchy. CLI exit codes key off these classes."""


class QuarcError(Exception):
    exit_code = 1


class ConfigError(QuarcError, ValueError):
    exit_code = 2


class ContractError(QuarcError, ValueError):
    """A caller violated an operation's precondition."""

    exit_code = 2


class DimensionError(ContractError):
    pass


class FormatError(QuarcError, ValueError):
    exit_code = 3


class NumericError(QuarcError, ArithmeticError):
    exit_code = 4
