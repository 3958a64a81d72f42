"""Exception hierarchy shared across the package."""


class MraugError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MraugError, ValueError):
    """An operand has the wrong shape.

    ``dim`` names the offending dimension (``"channels"``, ``"height"``...).
    """

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class MissingGradient(MraugError, KeyError):
    pass


class CheckpointError(MraugError):
    pass


# imaging
class NiftiError(MraugError):
    pass


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class Truncated(NiftiError):
    pass


class DegenerateVolume(MraugError, ValueError):
    pass


class EmptyAfterFilter(MraugError):
    pass


class LabelValueError(MraugError, ValueError):
    pass


class ManifestError(MraugError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DomainError(MraugError, KeyError):
    pass


class PolicyViolation(MraugError):
    """Validation-only labels were requested by a training consumer."""


class PhantomError(MraugError, ValueError):
    pass


# training
class DivergenceError(MraugError, FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ScheduleError(MraugError, ValueError):
    pass


class UnlabeledRecord(MraugError, ValueError):
    pass


class ModeError(MraugError, ValueError):
    pass


# evaluation
class Undefined(MraugError, ValueError):
    """A metric has no defined value for the given inputs."""


class FeatureError(MraugError, ValueError):
    pass


class MatrixError(MraugError, ValueError):
    pass


class PerplexityError(MraugError, ValueError):
    pass


# orchestration
class ConfigError(MraugError):
    def __init__(self, message, location=None):
        if location:
            message = f"{location}: {message}"
        super().__init__(message)
        self.location = location
