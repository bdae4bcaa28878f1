"""Exception hierarchy shared across the package."""


class PotAlignError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(PotAlignError, ValueError):
    """Operand shapes do not conform."""


class DomainError(PotAlignError, ValueError):
    """A numeric input lies outside an operation's domain."""


class NonPSDError(DomainError):
    """A Mahalanobis quadratic form went negative beyond tolerance."""


class ContractError(PotAlignError, ValueError):
    """A documented precondition was violated."""


class NumericError(PotAlignError, ArithmeticError):
    """Non-finite values or a failed numeric routine."""


class DivergenceError(NumericError):
    """Training produced a NaN/Inf loss."""


class InfeasibleError(PotAlignError, ValueError):
    """A transport problem has no feasible plan."""


class CheckpointError(PotAlignError):
    """Malformed checkpoint container."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ConfigError(PotAlignError, ValueError):
    """Invalid experiment configuration."""


class ParseError(PotAlignError, ValueError):
    """Malformed matrix text file."""
