"""Exception types shared across the library."""


class GeolossError(Exception):
    """Base class for all library errors."""


class NonPositiveDepth(GeolossError):
    """A 3D point lies at or behind the camera plane (z <= 0), or a depth
    map contains non-positive values where positive depth is required."""


class NotUnit(GeolossError):
    """A vector expected to have unit norm does not (tolerance 1e-6)."""


class GridTooSmall(GeolossError):
    """Grid is below the minimum size required by the operation."""


class ResolutionMismatch(GeolossError):
    """Input grids do not share the same width/height."""


class EmptyMask(GeolossError):
    """An evaluation mask selects no pixels."""


class NonFiniteLoss(GeolossError):
    """The objective or its gradients became NaN/inf; the solve diverged."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class NoIntersection(GeolossError):
    """A camera ray misses every surface in the scene."""


class InvalidConfig(GeolossError):
    """A configuration file or flag value is malformed or unknown."""
