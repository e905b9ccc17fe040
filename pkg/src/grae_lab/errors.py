"""Exception hierarchy shared by all modules."""


class GraeLabError(Exception):
    """Base class for every error raised by this package."""


class NumericalError(GraeLabError):
    """Failures of a numerical routine (CLI exit code 3)."""


class NotPositiveDefinite(NumericalError):
    pass


class ConvergenceFailure(NumericalError):
    pass


class DegenerateInput(NumericalError):
    pass


class NonFiniteGradient(NumericalError):
    pass


class NonFiniteObjective(NumericalError):
    def __init__(self, message, last_good=None, iteration=None):
        super().__init__(message)
        self.last_good = last_good
        self.iteration = iteration


class DimensionMismatch(GraeLabError, ValueError):
    pass


class LengthMismatch(GraeLabError, ValueError):
    pass


class DomainError(GraeLabError, ValueError):
    pass


class ZeroColumn(GraeLabError, ValueError):
    pass


class ConfigError(GraeLabError, ValueError):
    pass


class EmptySelection(GraeLabError, ValueError):
    pass


class DocumentError(GraeLabError):
    """Problems reading or writing a file-backed document."""


class IoError(DocumentError, OSError):
    pass


class VersionMismatch(DocumentError):
    pass


class CorruptDocument(DocumentError):
    pass


class BadMagic(DocumentError):
    pass


class TruncatedFile(DocumentError):
    pass
