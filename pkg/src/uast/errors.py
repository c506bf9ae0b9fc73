"""Exception types raised across the package."""


class UastError(Exception):
    """Base class for every error this package raises on purpose."""


class ShapeError(UastError, ValueError):
    pass


class ParameterError(UastError, ValueError):
    pass


class NumericError(UastError, ArithmeticError):
    pass


class ContractError(UastError, ValueError):
    """A caller violated a precondition (e.g. passed unlabeled rows to a supervised loss)."""


class ConfigError(UastError, ValueError):
    pass


class DegenerateBasisError(UastError):
    """One or more bases received (almost) no assignment mass in an M-step."""

    def __init__(self, indices, message=None):
        self.indices = tuple(int(i) for i in indices)
        super().__init__(message or f"bases {list(self.indices)} have no assignment mass")


class ParseError(UastError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConsistencyError(UastError, ValueError):
    pass
