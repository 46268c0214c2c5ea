class BerrypickError(Exception):
    """Base error; `exit_code` is what the CLI returns when it escapes."""

    exit_code = 1


class ConfigError(BerrypickError):
    exit_code = 2


class DomainError(BerrypickError):
    """Invalid numeric input to a pure function."""

    exit_code = 2


class DataError(BerrypickError):
    exit_code = 2


class StreamError(BerrypickError):
    exit_code = 2


class UsageError(BerrypickError):
    exit_code = 1


class ProtocolError(BerrypickError):
    exit_code = 1


class NumericalError(BerrypickError):
    exit_code = 3

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class StorageError(BerrypickError):
    exit_code = 4
