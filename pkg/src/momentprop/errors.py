"""Exception taxonomy shared across the package."""


class ParameterError(ValueError):
    """Invalid structural parameter (counts, kernel extent, stride)."""


class ShapeError(ValueError):
    """Field/parameter shape mismatch."""


class ConfigError(ValueError):
    """Invalid or malformed experiment configuration."""


class DataFormatError(ValueError):
    """Malformed binary dataset file."""


class DegenerateChannelError(ArithmeticError):
    """A channel collapsed to zero variance where normalization requires it."""


class DegenerateStatisticsError(ArithmeticError):
    """A moment ratio has a zero denominator (collapsed realization)."""


class FitError(ValueError):
    """Curve fit preconditions violated (too few or non-positive points)."""


class StatsQueryError(KeyError):
    """Requested a layer/metric the accumulator never recorded."""


class RunError(RuntimeError):
    """Experiment-level failure (no usable realizations, bad fan-out)."""


class UnsupportedArchitectureError(ValueError):
    """Operation defined only for a subset of architectures."""
