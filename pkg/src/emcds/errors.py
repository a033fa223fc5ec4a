"""Exception types shared across the package."""


class EmcdsError(Exception):
    """Base class for all package-specific errors."""
    pass


class ScheduleInvalidError(EmcdsError):
    """A step schedule produced a nonpositive or otherwise unusable value."""
    pass


class UnsupportedDimensionError(EmcdsError):
    """Operation restricted to d=1 (or small d) was asked for a larger model."""
    pass


class GridTooSmallError(EmcdsError):
    """Quadrature grid fails its tail-mass criterion; enlarge x_max."""
    pass


class ChainDivergedError(EmcdsError):
    """A simulated chain left the finite / bounded region.

    Carries ``chain_ids`` and ``step`` attributes when raised by the engine.
    """

    def __init__(self, message, chain_ids=(), step=None):
        super().__init__(message)
        self.chain_ids = tuple(chain_ids)
        self.step = step


class ResourceLimitError(EmcdsError):
    """Requested work exceeds the configured step budget."""
    pass


class ConstructionError(EmcdsError):
    """Coupling-curve construction failed (bisection bracket or quadrature)."""
    pass


class ConfigError(EmcdsError):
    """Malformed run configuration; message names the key (and line if known)."""
    pass
