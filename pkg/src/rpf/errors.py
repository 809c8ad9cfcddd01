"""Exception hierarchy shared across the package."""


class RPFError(Exception):
    """Base class for all package errors."""


class DataError(RPFError, ValueError):
    """Malformed or inconsistent input data."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class ConfigError(RPFError, ValueError):
    """Invalid or incomplete configuration."""


class NumericalError(RPFError, ArithmeticError):
    """A computation produced a non-finite or degenerate value."""


class ZeroIntensityError(NumericalError):
    """An observed event has zero intensity, so its log-likelihood is -inf."""


class SimulationExplosion(NumericalError):
    """The simulated process is (or looks) supercritical."""


class ColdStartError(RPFError, KeyError):
    """A query refers to a user the model has never seen."""

    def __str__(self):
        # KeyError would repr() the message
        return str(self.args[0]) if self.args else ""
