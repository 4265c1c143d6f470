"""Exception types shared across the package."""


class ShapeError(ValueError):
    """A tensor or layer received data whose shape violates its contract."""


class ConfigError(ValueError):
    """A specification, config file, or flag combination is invalid."""


class DivergenceError(RuntimeError):
    """Training produced non-finite values; the message names the first bad tensor."""


class MissingGradientError(RuntimeError):
    """A trainable parameter had no gradient when the optimizer stepped."""
