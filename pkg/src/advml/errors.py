"""Exception hierarchy shared by every advml module."""


class AdvMLError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(AdvMLError, ValueError):
    """Shapes do not chain or an input does not fit the network."""

    def __init__(self, message, layer=None):
        if layer is not None:
            message = f"layer {layer}: {message}"
        super().__init__(message)
        self.layer = layer


class TrainingDivergedError(AdvMLError, FloatingPointError):
    """A non-finite loss or update appeared during training."""


class QueryBudgetExhausted(AdvMLError):
    """A black-box routine ran out of queries before finishing.

    ``partial`` holds whatever was computed so far and ``completed`` how many
    coordinates (or steps) finished.
    """

    def __init__(self, message, partial=None, completed=0):
        super().__init__(message)
        self.partial = partial
        self.completed = completed


class PreconditionError(AdvMLError, ValueError):
    """An operation was called outside its documented precondition."""


class CapabilityError(AdvMLError):
    """Problem size exceeds what the dense implementation supports."""


class TriggerVisibilityError(AdvMLError, ValueError):
    """A trigger pattern exceeds its visibility bound."""


class CraftingFailedError(AdvMLError):
    """A poison sample lost label consistency during crafting."""

    def __init__(self, message, sample=None, predicted=None):
        super().__init__(message)
        self.sample = sample
        self.predicted = predicted


class FormatError(AdvMLError, ValueError):
    """Malformed model, dataset, trigger or config file."""

    def __init__(self, message, line=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{':'.join(where)}: {message}"
        super().__init__(message)
        self.line = line
        self.path = path


class VersionError(FormatError):
    """File header carries an unsupported format version."""
