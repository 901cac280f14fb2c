"""Exception types shared across the package."""


class RegnnError(Exception):
    """Base class for all errors raised by regnn."""


class DimensionError(RegnnError, ValueError):
    pass


class ContractError(RegnnError, ValueError):
    """A caller broke an operation's precondition."""


class NumericError(RegnnError, ArithmeticError):
    pass


class ConfigError(RegnnError, ValueError):
    pass


class IngestionError(RegnnError, ValueError):
    pass


class VocabLookupError(RegnnError, KeyError):
    pass
