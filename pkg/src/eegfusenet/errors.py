"""Exception hierarchy shared by every stage of the pipeline.

The CLI maps these onto exit codes, so new failure modes should subclass one
of the four families below rather than raising bare ``ValueError``.
"""


class EEGFuseNetError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(EEGFuseNetError, ValueError):
    exit_code = 2


class ContractError(EEGFuseNetError, ValueError):
    """A documented precondition of an operation was violated."""

    exit_code = 2


class DimensionError(ContractError):
    """Operand extents do not fit together."""


class DataError(EEGFuseNetError):
    exit_code = 3


class IntegrityError(DataError):
    """A stored blob or manifest is corrupt or missing."""


class ManifestError(DataError, ValueError):
    """A manifest failed to parse or validate."""


class DivergenceError(EEGFuseNetError, RuntimeError):
    exit_code = 4


class LeakageError(EEGFuseNetError, RuntimeError):
    """Test-subject data reached a fitting stage."""

    exit_code = 4


class GradCheckError(EEGFuseNetError, ArithmeticError):
    pass
