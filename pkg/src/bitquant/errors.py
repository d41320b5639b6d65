"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ValueError):
    """A configuration document or layer description is invalid."""


class CalibrationError(ValueError):
    """Range calibration cannot produce a usable quantization range."""


class UnsupportedSchemeError(ValueError):
    """The requested kernel/mode does not support this quantization scheme."""


class GraphError(ValueError):
    """The computation graph is malformed (e.g. contains a cycle)."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed; the message names the byte offset."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; the message names the epoch."""


class BenchError(RuntimeError):
    """A benchmark kernel failed its correctness cross-check."""
