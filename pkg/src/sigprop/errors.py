"""Exception hierarchy shared by the theory engine, the simulator and the CLI."""


class SigpropError(Exception):
    """Base class for all package errors."""


class DomainError(SigpropError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class UnsupportedRegimeError(SigpropError, ValueError):
    """The inputs describe a regime the recurrences deliberately do not cover."""


class NumericalError(SigpropError, ArithmeticError):
    """Base class for numerical failures (CLI exit code 3)."""


class QuadratureError(NumericalError):
    """A Gaussian expectation failed its refinement convergence check."""


class NoInteriorRootError(NumericalError):
    """The fixed-point function has no sign change on the search bracket."""


class NonFiniteActivationError(NumericalError):
    """The simulator produced a non-finite activation."""

    def __init__(self, layer, where="activation"):
        self.layer = layer
        super().__init__(f"non-finite {where} at layer {layer}")


class ConfigError(SigpropError, ValueError):
    """An experiment configuration field is missing or invalid."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
