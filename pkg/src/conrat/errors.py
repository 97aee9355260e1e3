class ConratError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(ConratError, ValueError):
    pass


class DegenerateInputError(ConratError, ValueError):
    pass


class BoundsError(ConratError, IndexError):
    pass


class ConfigError(ConratError, ValueError):
    pass


class FormatError(ConratError, ValueError):
    """Malformed input file. Carries the 1-based line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingDivergedError(ConratError, RuntimeError):
    pass


class VocabularyMismatchError(ConratError, ValueError):
    pass
