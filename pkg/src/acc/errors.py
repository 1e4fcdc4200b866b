"""Exception types shared across the package."""


class AccError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(AccError, ValueError):
    pass


class ShapeError(AccError, ValueError):
    pass


class CapacityError(AccError, ValueError):
    pass


class DegenerateInputError(AccError, ValueError):
    pass


class FeatureDisabledError(AccError, RuntimeError):
    pass


class ValidationError(AccError, ValueError):
    """A config value violates an invariant. ``field`` names the offender."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class ConfigParseError(AccError, ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class DivergenceError(AccError, RuntimeError):
    """Training produced a non-finite or runaway loss.

    ``state`` carries the training state at the failing step so callers can
    dump it for inspection.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
