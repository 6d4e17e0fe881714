"""Exception types shared across the package."""


class DistillsegError(Exception):
    """Base class for all package errors."""


class LoadError(DistillsegError):
    """A case directory or volume file could not be loaded."""


class IntegrityError(DistillsegError):
    """Loaded or constructed data violates a structural invariant."""


class ParameterError(DistillsegError):
    """A parameter value is outside its valid domain."""


class ConfigError(DistillsegError):
    """An experiment or split configuration is invalid."""


class NormalizationError(DistillsegError):
    """Intensity normalization is undefined for the given volume."""


class ShapeError(DistillsegError):
    """Array shapes violate an operation's contract."""


class ContractError(DistillsegError):
    """An operation precondition was violated by the caller."""


class TrainingDivergedError(DistillsegError):
    """Training produced a non-finite loss; carries the offending batch ids."""

    def __init__(self, message: str, batch_case_ids=None):
        super().__init__(message)
        self.batch_case_ids = list(batch_case_ids or [])
