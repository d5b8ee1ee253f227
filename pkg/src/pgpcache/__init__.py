"""Content popularity learning with a Poisson regressor over a Gaussian process.

Two inference engines (Hamiltonian Monte Carlo and mean-field variational
Bayes) feed a knapsack-style cache placement policy.
"""

from pgpcache.errors import (
    InvalidInputError,
    IntegratorDivergence,
    NonConvergenceError,
    NumericalFailureError,
    SamplerFailureError,
)
from pgpcache.kernel import CovFactor, HyperParams, build_cov
from pgpcache.posterior import GammaPrior, RequestMatrix, UnconstrainedState

__all__ = [
    "CovFactor",
    "GammaPrior",
    "HyperParams",
    "IntegratorDivergence",
    "InvalidInputError",
    "NonConvergenceError",
    "NumericalFailureError",
    "RequestMatrix",
    "SamplerFailureError",
    "UnconstrainedState",
    "build_cov",
]

__version__ = "0.1.0"
