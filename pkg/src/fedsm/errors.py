"""Exception hierarchy shared by every fedsm module."""


class FedSMError(Exception):
    pass


class DimensionError(FedSMError, ValueError):
    pass


class DegenerateInput(FedSMError, ValueError):
    pass


class ConfigError(FedSMError, ValueError):
    pass


class DataError(FedSMError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericsError(FedSMError, ArithmeticError):
    pass


class ProtocolError(FedSMError, RuntimeError):
    pass
