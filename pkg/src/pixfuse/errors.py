"""Exception types shared across the toolkit."""


class PixfuseError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(PixfuseError):
    """Invalid configuration value or inconsistent call arguments."""


class FormatError(PixfuseError):
    """On-disk data that does not conform to the documented format."""


class ShapeError(PixfuseError):
    """Tensor shape incompatible with the network."""


class NumericalError(PixfuseError):
    """Degenerate numerical input (zero-norm vector, NaN loss, ...)."""


class DegenerateBatchError(PixfuseError):
    """A batch with too little usable content to compute a loss."""


class PipelineError(PixfuseError):
    """A training phase cannot proceed (no labels, divergence, ...)."""


class EvalError(PixfuseError):
    """Evaluation requested on data without any labeled pixels."""
