"""Shared exception types."""


class InvalidArgumentError(ValueError):
    """An argument is outside the domain of the operation (e.g. non-finite)."""


class ContractViolationError(ValueError):
    """A precondition between cooperating components was broken."""


class NumericFailureError(ArithmeticError):
    """A numeric routine produced non-finite values.

    Carries the offending state so callers can log or recover from it.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class StartupFailureError(RuntimeError):
    """The controller could not be brought up (no sensor data, failed refine)."""


class ControllerHaltError(RuntimeError):
    """Too many consecutive solver failures; the control loop gave up."""
