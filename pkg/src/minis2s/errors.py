"""Exception hierarchy shared across the toolkit.

Exit-code mapping used by the CLI: ConfigError -> 1, DataError -> 2,
NumericError -> 3.
"""


class ConfigError(ValueError):
    """Bad command line usage, malformed config file, or unknown key."""


class DataError(ValueError):
    """Missing or corrupt data files, vocabulary violations."""


class NumericError(ArithmeticError):
    """Numeric failure: non-finite loss, impossible alignment, bad shapes."""


class DimensionError(NumericError):
    """Operand shapes incompatible with the requested operation."""


class DomainError(NumericError):
    """Input outside an operation's mathematical domain (e.g. log of <= 0)."""


class ImpossibleAlignmentError(NumericError):
    """CTC target cannot be aligned within the available frames."""
