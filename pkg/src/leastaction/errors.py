"""Exception types shared across the package."""


class EvaluationError(RuntimeError):
    """Coefficient evaluation failed: singular/ill-conditioned diffusion
    matrix, non-finite entries, or values beyond the configured cap."""

    def __init__(self, message, t=None, z=None):
        super().__init__(message)
        self.t = t
        self.z = z


class NotPositiveDefiniteError(RuntimeError):
    """A matrix required to be positive definite is not (model degeneracy)."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class BlowUpError(RuntimeError):
    """A trajectory exceeded the blow-up guard during integration."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class GridMismatchError(ValueError):
    """Arrays supplied on incompatible time grids."""


class ConfigError(ValueError):
    """Malformed configuration file or unknown model key."""


class RiccatiExplosionError(BlowUpError):
    """The curvature ODE blew up: the expansion point is not a minimizer."""
