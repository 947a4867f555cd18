"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class NumericError(ArithmeticError):
    """A non-finite value or a numeric blowup was detected."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class FitError(ValueError):
    """Conic fit failed (collinear or degenerate input)."""


class VisibilityError(ValueError):
    """Geometry is not visible from the camera."""


class DegeneracyError(ValueError):
    """Projection is too close to a grazing view to be meaningful."""


class TrainingFailure(RuntimeError):
    """A training run finished without meeting its quality floor."""

    def __init__(self, message, metric=None):
        super().__init__(message)
        self.metric = metric


class ConfigError(ValueError):
    """Bad configuration key, value, or missing dependency."""
