"""Exception types shared across the engine."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigurationError(ValueError):
    """A config value combination is invalid (bad groups, grids, names, ...)."""


class NonFiniteError(RuntimeError):
    """A loss or gradient became NaN/inf; the step was aborted."""


class DataFormatError(ValueError):
    """A dataset file is malformed; message carries the byte offset."""
