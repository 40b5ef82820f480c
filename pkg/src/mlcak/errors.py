"""Exception types shared across the package.

Everything derives from ValueError (or ArithmeticError for numerics) so
callers that don't care about the fine-grained class can catch the usual
builtins.
"""


class ContractError(ValueError):
    """An operation precondition was violated (empty input, bad range, ...)."""


class ShapeError(ContractError):
    """Operand shapes violate an operation's contract."""


class ConfigError(ValueError):
    """Invalid configuration object or flag combination."""


class ParseError(ValueError):
    """Malformed on-disk artifact (manifest CSV, PGM header, checkpoint)."""


class NumericalError(ArithmeticError):
    """A training/eval quantity became non-finite."""
