"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes or channel counts do not match an operation's contract."""


class GeometryError(ValueError):
    """Requested spatial geometry is impossible (empty output, bins too large, ...)."""


class ConfigError(ValueError):
    """Invalid configuration value."""


class TapeError(RuntimeError):
    """Backward called with a bad loss tensor or off-tape tensor."""


class GradientError(RuntimeError):
    """Optimizer step found a parameter without a populated gradient."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


class LabelError(ValueError):
    """Label map contains out-of-range values, or every pixel is ignored."""


class DegenerateBatchError(ValueError):
    """Batch statistics are undefined (single value per channel in train mode)."""


class ScheduleError(ValueError):
    """Learning-rate schedule stepped past its total iteration count."""


class FormatError(ValueError):
    """Malformed on-disk file (PPM/PGM header, manifest, checkpoint magic)."""


class CorruptCheckpointError(FormatError):
    """Checkpoint file is truncated or has trailing garbage."""


class PairingError(FormatError):
    """Image and label files of one sample disagree on size."""


class IncompatibleModelError(RuntimeError):
    """Checkpoint tensor names do not match the model being loaded."""


class MetricError(ValueError):
    """Metric requested from an empty confusion matrix."""
