"""Exception hierarchy shared by the library and the CLI exit-code contract."""


class CleEkfError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(CleEkfError, ValueError):
    """Malformed model, parameter or configuration input."""

    exit_code = 1

    def __init__(self, message: str, field: str | None = None):
        if field is not None and field not in message:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class NotContractiveError(CleEkfError, ValueError):
    """Raised when L_f >= 1, where the mean-square bound has no positive root."""

    exit_code = 2


class NumericalError(CleEkfError, ArithmeticError):
    """A non-finite value appeared during simulation or filtering."""

    exit_code = 3

    def __init__(self, message: str, step: int | None = None, run: int | None = None):
        where = []
        if run is not None:
            where.append(f"run {run}")
        if step is not None:
            where.append(f"step {step}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.step = step
        self.run = run
