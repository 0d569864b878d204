"""Exception hierarchy shared by the CLI, the HTTP API and the services.

Every error carries the process exit code the CLI should use for it.
"""


class CertSimError(Exception):
    exit_code = 2


class UsageError(CertSimError):
    exit_code = 1


class DataError(CertSimError):
    """Dataset, manifest or embedding-store content is unusable."""


class FormatError(CertSimError):
    """Binary file does not follow the LSTN / checkpoint / store layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TensorIOError(CertSimError, OSError):
    """File ended before the declared payload was read."""


class DimensionError(CertSimError, ValueError):
    pass


class ParameterError(CertSimError, ValueError):
    pass


class ConfigurationError(CertSimError, ValueError):
    pass


class DegenerateEmbeddingError(CertSimError, ArithmeticError):
    pass


class EvaluationError(CertSimError, ArithmeticError):
    pass


class AttackError(CertSimError, ArithmeticError):
    pass


class SoundnessViolation(CertSimError, AssertionError):
    exit_code = 3
