"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 1, data
problems exit 2, numerical failures exit 3.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed input data or impossible data request."""


class NumericalError(RuntimeError):
    """Training produced a non-finite value; carries period/batch context."""

    def __init__(self, message: str, period: int | None = None, batch_index: int | None = None):
        ctx = []
        if period is not None:
            ctx.append(f"period={period}")
        if batch_index is not None:
            ctx.append(f"batch={batch_index}")
        suffix = f" ({', '.join(ctx)})" if ctx else ""
        super().__init__(message + suffix)
        self.period = period
        self.batch_index = batch_index
