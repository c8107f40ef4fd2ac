"""Exception types shared across the package."""


class RuleDenoiseError(Exception):
    """Base class for all runtime errors raised by this package."""


class DatasetError(RuleDenoiseError, ValueError):
    pass


class DatasetParseError(DatasetError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class EmptyDatasetError(DatasetError):
    pass


class CapacityError(DatasetError):
    pass


class NumericError(RuleDenoiseError, ArithmeticError):
    pass


class EmptyEvaluationError(RuleDenoiseError, ValueError):
    pass


class RuleParseError(RuleDenoiseError, ValueError):
    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class MemoryLoadError(RuleDenoiseError, ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class ConfigurationError(RuleDenoiseError):
    pass


class TransportError(RuleDenoiseError):
    pass


class ProtocolError(RuleDenoiseError):
    pass


class ResponseFormatError(RuleDenoiseError, ValueError):
    """An LLM response did not follow the required format."""


class PlanningError(RuleDenoiseError):
    pass
