"""Error types raised across smoothguard."""


class SmoothGuardError(Exception):
    """Base class for every error raised by the toolkit."""


class ConfigurationError(SmoothGuardError):
    """Invalid configuration: bad value, missing field or incompatible shapes."""


class NumericError(SmoothGuardError):
    """A non-finite value appeared inside a computation."""


class InputError(SmoothGuardError):
    """Data handed to an operation violates its preconditions."""


class DatasetParseError(InputError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, path: str = "", location: str = ""):
        self.path = path
        self.location = location
        where = f" ({path}{', ' + location if location else ''})" if path else ""
        super().__init__(f"{message}{where}")
