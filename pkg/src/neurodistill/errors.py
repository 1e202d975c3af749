"""Exception hierarchy shared by every module."""


class NeuroDistillError(Exception):
    """Base class for all package errors."""


class DimensionError(NeuroDistillError, ValueError):
    pass


class ContractError(NeuroDistillError, ValueError):
    """A documented precondition was violated by the caller."""


class DegenerateInputError(NeuroDistillError, ValueError):
    pass


class ConfigError(NeuroDistillError, ValueError):
    pass


class UndefinedMetricError(NeuroDistillError, ValueError):
    pass


class FoldError(NeuroDistillError):
    """Raised while folding float scales into integer constants."""


class TrainingError(NeuroDistillError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class ParseError(NeuroDistillError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class FormatError(NeuroDistillError):
    pass


class IntegrityError(NeuroDistillError):
    pass
