"""Exception hierarchy shared by all taskdisc modules."""


class TaskDiscError(Exception):
    """Base class for every error raised by taskdisc."""


class DimensionError(TaskDiscError, ValueError):
    pass


class ContractError(TaskDiscError, ValueError):
    pass


class PoisonedStateError(TaskDiscError, FloatingPointError):
    """Non-finite values appeared in an optimizer state."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NumericalError(TaskDiscError, FloatingPointError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class SpecError(TaskDiscError, ValueError):
    pass


class FormatError(TaskDiscError, ValueError):
    pass


class CorruptionError(TaskDiscError, ValueError):
    pass


class ParseError(TaskDiscError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class DegenerateTaskError(TaskDiscError, ValueError):
    pass


class DegenerateSplitError(TaskDiscError, ValueError):
    pass


class UnsupportedArityError(TaskDiscError, ValueError):
    pass


class TrainingFailure(TaskDiscError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ConfigError(TaskDiscError, ValueError):
    """Experiment configuration failed validation."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
