"""
Error hierarchy for the NSN lab.

Every error carries the process exit code the management commands report:
2 for configuration problems, 3 for data problems, 4 for numerical failures.
"""


class NsnError(Exception):
    """Base class for all NSN errors."""

    exit_code = 1


class ConfigurationError(NsnError):
    exit_code = 2


class DimensionError(ConfigurationError, ValueError):
    """Operand shapes do not line up."""


class RankError(ConfigurationError, ValueError):
    """A rank lies outside the range a layer supports."""

    def __init__(self, rank, max_rank, message=None):
        self.rank = rank
        self.max_rank = max_rank
        super().__init__(message or f'rank {rank} outside [1, {max_rank}]')


class RankOrderError(ConfigurationError, ValueError):
    """Variant rank is not strictly below the anchor rank."""


class PlanError(ConfigurationError):
    """A surgery plan does not fit the checkpoint it is applied to."""


class AnalysisError(ConfigurationError):
    """An analysis was requested on a model it does not apply to."""


class DataError(NsnError):
    exit_code = 3


class DataFormatError(DataError, ValueError):
    """A file failed to parse; ``offset`` is the byte offset of the fault."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f'{message} (at byte {offset})'
        super().__init__(message)


class CheckpointError(DataError):
    pass


class LabelError(DataError, ValueError):
    """A class label lies outside [0, num_classes)."""


class NumericalError(NsnError):
    exit_code = 4

    def __init__(self, message, iterations=None):
        self.iterations = iterations
        super().__init__(message)


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch, step, loss):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f'loss diverged to {loss} at epoch {epoch}, step {step}')
