"""Exception types shared across the package."""


class SSMVLAError(Exception):
    pass


class UnknownTaskError(SSMVLAError, KeyError):
    pass


class InfeasibleTaskError(SSMVLAError):
    pass


class NonFiniteActionError(SSMVLAError, ValueError):
    pass


class MalformedContainerError(SSMVLAError):
    pass


class SchemaVersionError(SSMVLAError):
    pass


class ShapeMismatchError(SSMVLAError, ValueError):
    pass


class SingularFitError(SSMVLAError, ValueError):
    pass


class InsufficientDataError(SSMVLAError, ValueError):
    pass


class NonFiniteLossError(SSMVLAError, FloatingPointError):
    """Raised when a training step produces a NaN/inf loss.

    ``terms`` holds the per-term values at the failing step.
    """

    def __init__(self, message, terms=None):
        super().__init__(message)
        self.terms = dict(terms or {})


class ConfigError(SSMVLAError, ValueError):
    pass
