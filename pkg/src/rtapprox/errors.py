"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Inputs violate a documented precondition."""


class SizeGuardError(ValidationError):
    """Joint state space is too large for the master-equation solver."""


class InvariantViolation(RuntimeError):
    """A probability left its admissible range during integration."""

    def __init__(self, message, time=None, node=None):
        super().__init__(message)
        self.time = time
        self.node = node
