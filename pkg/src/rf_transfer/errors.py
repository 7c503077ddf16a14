"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TransferError(Exception):
    exit_code = 2


class DimensionError(TransferError, ValueError):
    pass


class RangeError(TransferError, ValueError):
    pass


class ConfigError(TransferError, ValueError):
    pass


class ParseError(TransferError, ValueError):
    pass


class CacheMissError(TransferError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep the message plain
        return str(self.args[0]) if self.args else ""


class NumericError(TransferError, ArithmeticError):
    exit_code = 3


class DivergenceError(NumericError):
    pass


class StageError(TransferError):
    """Wraps a component failure with the pipeline stage it came from."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 2)
