"""Exception types shared across the lab."""


class ConfigError(ValueError):
    """A configuration value is missing, malformed, or out of range.

    ``path`` is the dotted location of the offending field, e.g. ``agent.gamma``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class ContractError(ValueError):
    """An operation was called with arguments that violate its contract
    (wrong shapes, stale traces, empty windows)."""


class NumericalInstabilityError(RuntimeError):
    """Raised when integration or learning produced non-finite values."""

    def __init__(self, message: str, step: int | None = None, diagnostics: dict | None = None):
        self.step = step
        self.diagnostics = diagnostics or {}
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"{message}{where}; diagnostics={self.diagnostics}")
