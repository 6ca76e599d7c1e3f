"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class CapacityError(ValueError):
    """A dataset split cannot supply the requested episode composition."""


class DegenerateInputError(ValueError):
    """Numerically degenerate input, e.g. a near-zero vector fed to cosine distance."""


class ConfigError(ValueError):
    """Invalid configuration value; the message names the offending field."""


class DataLoadError(RuntimeError):
    """A dataset directory or file could not be read; the message names it."""


class TrainingDiverged(RuntimeError):
    """The episodic loss became non-finite; a diagnostic dump was written."""
