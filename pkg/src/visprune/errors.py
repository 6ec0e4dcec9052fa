"""Exception types. ``exit_code`` is what the CLI returns when one escapes."""


class VisPruneError(Exception):
    exit_code = 2


class InvalidInput(VisPruneError, ValueError):
    pass


class InvalidK(InvalidInput):
    pass


class InvalidConfig(VisPruneError, ValueError):
    exit_code = 1


class ConfigError(InvalidConfig):
    """Config file problem; the message names the offending key path."""


class NumericalError(VisPruneError, ArithmeticError):
    pass


class DegenerateRanks(VisPruneError, ValueError):
    pass


class InvalidTrace(VisPruneError, ValueError):
    pass


class CalibrationError(VisPruneError):
    pass


class UnsupportedFormat(VisPruneError):
    exit_code = 3


class CorruptFile(VisPruneError):
    exit_code = 3


class StageError(VisPruneError):
    """Wraps a failure inside a pipeline stage, keeping the cause's exit code."""

    def __init__(self, stage: str, index: int, cause: Exception):
        super().__init__(f"{stage} failed at trace entry {index}: {cause}")
        self.stage = stage
        self.index = index
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 2)
