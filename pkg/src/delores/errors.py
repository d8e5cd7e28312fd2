"""Exception hierarchy. The CLI maps these onto exit codes."""


class DeloresError(Exception):
    pass


class ConfigError(DeloresError, ValueError):
    """Invalid configuration or arguments (CLI exit code 1)."""


class DataError(DeloresError):
    """Unreadable or malformed input data (CLI exit code 2)."""


class CheckpointError(DataError):
    pass


class NumericalError(DeloresError, FloatingPointError):
    """NaN/Inf or a degenerate quantity during computation (CLI exit code 3)."""


class ShapeError(DeloresError, ValueError):
    pass
