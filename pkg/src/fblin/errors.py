"""Exception types shared across the package."""


class ModelFormatError(ValueError):
    """A model document is malformed or dimensionally inconsistent."""


class DivergenceError(RuntimeError):
    """A simulation produced a non-finite or runaway value.

    Attributes
    ----------
    index : int
        Sample index at which divergence was detected.
    """

    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (sample {index})")
        self.detail = message
        self.index = index


class ConditioningError(RuntimeError):
    """The MPC Hessian of some horizon is not usable."""

    def __init__(self, message: str, horizon: int):
        super().__init__(f"{message} (horizon {horizon})")
        self.horizon = horizon


class ConfigError(ValueError):
    """Experiment configuration violates a cross-module constraint."""
