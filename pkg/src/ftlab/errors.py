"""Exception hierarchy shared by every ftlab module."""


class FTLabError(Exception):
    """Base class for all library errors."""


class ShapeError(FTLabError, ValueError):
    pass


class ContractError(FTLabError):
    """A caller broke an operation's precondition."""


class NonFiniteError(FTLabError, FloatingPointError):
    pass


class OracleError(FTLabError):
    pass


class InputError(FTLabError, ValueError):
    pass


class ConfigError(FTLabError, ValueError):
    pass


class DataError(FTLabError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TemplateError(FTLabError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class TrainingError(FTLabError, RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, step: int | None = None):
        where = []
        if epoch is not None:
            where.append(f"epoch {epoch}")
        if step is not None:
            where.append(f"step {step}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.epoch = epoch
        self.step = step


class ReportError(FTLabError):
    pass
