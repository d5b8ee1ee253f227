"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Inputs violate a documented precondition (shape, sign, range)."""


class NumericalFailureError(ArithmeticError):
    """A factorization or evaluation could not be completed in floating point."""

    def __init__(self, message, jitter=None):
        super().__init__(message)
        self.jitter = jitter


class IntegratorDivergence(NumericalFailureError):
    """A leapfrog trajectory produced a non-finite energy or gradient."""


class SamplerFailureError(NumericalFailureError):
    """The Markov chain stopped making progress (acceptance collapsed)."""


class NonConvergenceError(NumericalFailureError):
    """An iterative scalar solve hit its iteration cap."""

    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm
