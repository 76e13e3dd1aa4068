"""Exception hierarchy shared by all modules.

The CLI maps each family to its own exit code, so callers should raise the
most specific class available.
"""


class DotProjError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(DotProjError, ValueError):
    exit_code = 2


class PlacementError(ConfigurationError):
    """An optode site is not on the exterior surface of the phantom."""


class LaunchError(ConfigurationError):
    """A source beam does not enter the labeled domain."""


class DeadChannelError(DotProjError):
    """One or more configured source-detector pairs recorded no packets."""

    exit_code = 3

    def __init__(self, pairs, message=None):
        self.pairs = [tuple(int(v) for v in p) for p in pairs]
        if message is None:
            message = f"dead channel(s) with zero detected packets: {self.pairs}"
        super().__init__(message)


class NumericalError(DotProjError, ArithmeticError):
    exit_code = 4


class ContractError(DotProjError, ValueError):
    """Inputs violate a cross-object contract (shapes, orderings, frames)."""

    exit_code = 2
