"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid model, mechanism or experiment configuration."""


class InputError(ValueError):
    """Invalid data passed to an operation."""


class TrainingError(RuntimeError):
    """Optimisation diverged or produced non-finite values."""


class NumericError(ArithmeticError):
    """A numerical routine (integration, bisection) failed."""
