"""Exception hierarchy shared by all modules."""


class RelMetricError(Exception):
    """Base class for package errors."""


class ContractError(RelMetricError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class NonFiniteError(RelMetricError, FloatingPointError):
    """A NaN or infinity appeared in a tensor or gradient."""


class InvalidPoseError(ContractError):
    pass


class DegenerateSceneError(ContractError):
    """The scene bounding box has zero extent on every axis."""


class ProjectionDomainError(ContractError):
    """A point lies outside the unit cube beyond tolerance."""


class ConfigError(ContractError):
    pass


class DatasetError(RelMetricError):
    pass


class FormatError(RelMetricError, ValueError):
    """A file does not follow its line-oriented text or binary layout."""


class TrainingAborted(RelMetricError):
    """Training stopped on a non-finite loss."""

    def __init__(self, message, step=None, lr=None, batch_ids=None):
        super().__init__(message)
        self.step = step
        self.lr = lr
        self.batch_ids = batch_ids


class OptimizationAborted(RelMetricError):
    """Pose optimization stopped; ``trace`` holds the steps completed so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
