"""Exception types shared across the package."""


class DomainError(ValueError):
    """A parameter vector lies outside the model's box domain."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class NumericalFailure(RuntimeError):
    """Fatal numerical problem (non-finite target, overflow in log-space sums)."""


class ConfigError(ValueError):
    """Invalid run configuration; carries every problem found, not just the first."""

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
