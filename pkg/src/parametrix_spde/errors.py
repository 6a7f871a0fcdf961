"""Exception types shared across the package."""


class DomainError(ValueError):
    """Arguments outside the domain of an operation (e.g. ``s >= t``)."""


class NumericalError(RuntimeError):
    """A numerical procedure failed to converge or to reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class UnsupportedOperation(NotImplementedError):
    """The requested operation is not available for this object kind."""


class ConfigError(ValueError):
    """Invalid experiment configuration.

    ``tag`` names the violated condition, e.g. ``"(D3) p > q > 2d+4"``.
    """

    def __init__(self, message, tag=None):
        super().__init__(f"{tag}: {message}" if tag else message)
        self.tag = tag
