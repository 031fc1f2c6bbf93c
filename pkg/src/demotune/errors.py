"""Exception hierarchy shared by all modules."""


class DemoTuneError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(DemoTuneError, ValueError):
    """A configuration value is outside its admissible range."""


class InvalidInputError(DemoTuneError, ValueError):
    """Input data has the wrong shape, length or content."""


class OutOfRangeError(DemoTuneError, ValueError):
    """A bounded value lies at or outside its bounds."""


class ParseError(DemoTuneError, ValueError):
    """A demonstration file could not be parsed."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class GradientEvaluationError(DemoTuneError, ArithmeticError):
    """The cost was non-finite at a finite-difference perturbation point."""

    def __init__(self, component, value):
        super().__init__(
            f"non-finite cost {value!r} when perturbing component {component}"
        )
        self.component = component
        self.value = value


class NumericalFailure(DemoTuneError, ArithmeticError):
    """A numerical routine broke down (e.g. covariance lost definiteness)."""
