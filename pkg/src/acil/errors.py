"""Exception types shared across the package."""


class ConfigurationError(Exception):
    """A config value (or combination of values) is invalid."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DatasetFormatError(Exception):
    """A dataset file does not conform to the expected format."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class ContractViolation(ValueError):
    """An argument violates an operation's precondition."""


class NumericalDivergence(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ResultsSchemaError(Exception):
    """A results CSV does not match the expected schema."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column
