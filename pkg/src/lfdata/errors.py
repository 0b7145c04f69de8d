class LfDataError(Exception):
    """Base class for all package errors."""


class ParseError(LfDataError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class ValidationError(LfDataError):
    pass


class ConfigError(LfDataError):
    pass


class RoutingError(LfDataError):
    pass


class CacheError(LfDataError):
    pass


class TrainingError(LfDataError):
    pass
