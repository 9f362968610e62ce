"""rcanit exceptions."""


class RCANItException(Exception):
    """rcanit related exceptions."""


class RCANItError(RCANItException):
    """rcanit related errors."""


class ConfigurationError(RCANItError, ValueError):
    """Invalid configuration value; the message names the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(RCANItError, ValueError):
    """Tensor shape or channel contract violated."""


class ColorspaceError(RCANItError, TypeError):
    """Image is not in the colorspace the operation needs."""


class DatasetNotFound(RCANItError, FileNotFoundError):
    """Dataset root or its HR directory is missing."""


class DatasetIndexError(RCANItError, IndexError):
    """HR and LR directories disagree on file names."""


class SamplingError(RCANItError):
    """Patch can not be sampled from the image."""


class ScheduleError(RCANItError, ValueError):
    """Iteration outside of the schedule range."""


class MetricError(RCANItError, ValueError):
    """Metric precondition violated (window size, border crop)."""


class ReportError(RCANItError):
    """Benchmark report can not be built."""


class CheckpointError(RCANItError):
    """Checkpoint file is corrupt or unreadable."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class TrainingAborted(RCANItError):
    """Training stopped before completing its budget."""


class NonFiniteError(TrainingAborted):
    """Loss or a parameter became NaN/inf."""

    def __init__(self, iteration: int, tensor_name: str, seed: int, lr: float):
        self.iteration = iteration
        self.tensor_name = tensor_name
        self.seed = seed
        self.lr = lr
        super().__init__(
            f"non-finite value in '{tensor_name}' at iteration {iteration} "
            f"(seed={seed}, lr={lr})"
        )
