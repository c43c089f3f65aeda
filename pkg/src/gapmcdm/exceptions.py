"""Exception hierarchy shared by every module of the package."""


class GapmError(Exception):
    """Base class for errors raised by gapmcdm."""


class DomainError(GapmError, ValueError):
    """An argument lies outside the domain of the function."""


class ConfigError(GapmError, ValueError):
    """Inconsistent or invalid configuration."""


class InvalidDesignError(GapmError, ValueError):
    """The Q-matrix or data shapes cannot define a model."""


class InvalidStateError(GapmError, ValueError):
    """A parameter update left no admissible mass on the simplex."""


class DegenerateUpdateError(GapmError, ValueError):
    """A sphere projection was asked to normalise a (near) zero vector."""


class UnsupportedDimensionError(GapmError, ValueError):
    """The requested computation is guarded against this latent dimension."""


class NumericalError(GapmError, ArithmeticError):
    """A log-density evaluated to a non-finite value.

    ``item`` holds the index of the offending item when one can be
    identified, otherwise ``None`` (e.g. the prior term overflowed).
    """

    def __init__(self, message, item=None):
        super().__init__(message)
        self.item = item
