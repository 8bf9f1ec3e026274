"""Exception types shared across the library."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ArgumentError(ValueError):
    """An argument is outside its documented domain."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but numerically degenerate (e.g. all-zero rows)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or would unavoidably do so."""


class ConfigError(ValueError):
    """A run configuration key is unknown or carries an invalid value."""


class TrainingDivergedError(RuntimeError):
    """Training produced a non-finite loss; carries the state at abort."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
