"""Joint density of the Poisson-GP model with the latent GP integrated out.

Unnormalised negative log posterior over ``z = [lambda, phi]``::

    psi = sum_m (-dsum_m lambda_m + N exp(lambda_m))
          + 1/2 log det Ktilde + 1/2 lambda' Ktilde^{-1} lambda
          + sum_q (-A_q phi_q + B_q exp(phi_q))

``log d!`` and ``(M/2) log 2 pi`` are dropped, so values are comparable only
for a fixed dataset.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pgpcache.errors import InvalidInputError, NumericalFailureError
from pgpcache.kernel import (
    HyperParams,
    as_features,
    build_cov,
    trace_products,
    inverse,
    kernel_matrix,
    solve_with,
    sq_dists,
)

# Gam(A, B) with A the shape and B the scale; the log-density term uses the rate 1/B
DEFAULT_SHAPE = 1.0
DEFAULT_SCALE = 0.1
DEFAULT_RATE = 1.0 / DEFAULT_SCALE


@dataclass(frozen=True)
class RequestMatrix:
    """Per-slot request counts, one row per content and one column per slot."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim == 1:
            c = c[:, None]
        if c.ndim != 2 or c.shape[1] < 1:
            raise InvalidInputError(f"request matrix must be (M, N) with N >= 1, got {c.shape}")
        if not np.all(np.isfinite(c)) or np.any(c < 0) or np.any(c != np.round(c)):
            raise InvalidInputError("request counts must be non-negative integers")
        c = c.astype(np.int64)
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def n_contents(self) -> int:
        return self.counts.shape[0]

    @property
    def n_slots(self) -> int:
        return self.counts.shape[1]

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=1).astype(float)


@dataclass(frozen=True)
class GammaPrior:
    """Gamma(shape, rate) with density proportional to ``t**(shape-1) * exp(-rate*t)``."""

    shape: float = DEFAULT_SHAPE
    rate: float = DEFAULT_RATE

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise InvalidInputError("Gamma prior needs shape > 0 and rate > 0")

    @classmethod
    def from_scale(cls, shape: float, scale: float) -> "GammaPrior":
        if not scale > 0:
            raise InvalidInputError("Gamma prior needs scale > 0")
        return cls(shape, 1.0 / scale)


def default_priors(n_features: int, shape: float = DEFAULT_SHAPE,
                   scale: float = DEFAULT_SCALE) -> list[GammaPrior]:
    """One Gam(shape, scale) prior per entry of ``[eta, alpha_0, ..., alpha_Q]``."""
    return [GammaPrior.from_scale(shape, scale) for _ in range(n_features + 2)]


@dataclass(frozen=True)
class UnconstrainedState:
    lam: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(phi))):
            raise InvalidInputError("state must be finite")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "phi", phi)

    @property
    def rates(self) -> np.ndarray:
        return np.exp(self.lam)

    @property
    def hyper(self) -> HyperParams:
        return HyperParams.from_log(self.phi)

    def pack(self) -> np.ndarray:
        return np.concatenate([self.lam, self.phi])

    @classmethod
    def unpack(cls, z, n_contents: int) -> "UnconstrainedState":
        z = np.asarray(z, dtype=float)
        return cls(z[:n_contents], z[n_contents:])


def mle_popularity(data: RequestMatrix) -> np.ndarray:
    """Per-content mean request count over the observed slots."""
    return data.totals / data.n_slots


def hyper_from_log(phi) -> HyperParams:
    """``HyperParams.from_log`` that reports overflow/underflow as a numerical failure."""
    with np.errstate(over="ignore", under="ignore"):
        theta = np.exp(np.asarray(phi, dtype=float))
    if not np.all(np.isfinite(theta)) or theta[0] <= 0 or theta[1] <= 0:
        raise NumericalFailureError(f"hyperparameters out of floating-point range: log theta = {phi}")
    return HyperParams.from_theta(theta)


def _prior_arrays(priors, n_par):
    if priors is None:
        return np.zeros(n_par), np.zeros(n_par)
    priors = list(priors)
    if len(priors) != n_par:
        raise InvalidInputError(f"expected {n_par} hyperpriors, got {len(priors)}")
    return (np.array([p.shape for p in priors], dtype=float),
            np.array([p.rate for p in priors], dtype=float))


class PoissonGPModel:
    """Evaluates ``psi`` and its gradient on packed vectors ``z = [lambda, phi]``.

    Data enter only through per-content totals, computed once.
    ``priors=None`` drops the hyperprior terms.
    """

    def __init__(self, data: RequestMatrix, features, priors: Sequence[GammaPrior] | None = None):
        x = as_features(features)
        if x.shape[0] != data.n_contents:
            raise InvalidInputError(
                f"{data.n_contents} request rows but {x.shape[0]} feature rows"
            )
        self.features = x
        self.totals = data.totals
        self.n_slots = data.n_slots
        self.n_contents = x.shape[0]
        self.n_features = x.shape[1]
        self.dists = sq_dists(x)
        self.shape, self.rate = _prior_arrays(priors, self.n_features + 2)

    @property
    def dim(self) -> int:
        return self.n_contents + self.n_features + 2

    def _split(self, z):
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise InvalidInputError(f"state vector must have length {self.dim}")
        return z[: self.n_contents], z[self.n_contents:]

    def value(self, z) -> float:
        lam, phi = self._split(z)
        hp = hyper_from_log(phi)
        cf = build_cov(None, hp, dists=self.dists)
        alpha = solve_with(cf, lam)
        with np.errstate(over="ignore"):
            data_term = -self.totals @ lam + self.n_slots * np.sum(np.exp(lam))
            prior_term = np.sum(-self.shape * phi + self.rate * np.exp(phi))
        return float(data_term + 0.5 * cf.logdet + 0.5 * lam @ alpha + prior_term)

    def value_and_grad(self, z):
        lam, phi = self._split(z)
        hp = hyper_from_log(phi)
        kmat = kernel_matrix(None, hp, self.dists)
        cf = build_cov(None, hp, dists=self.dists, kmat=kmat)
        kinv = inverse(cf)
        alpha = kinv @ lam
        with np.errstate(over="ignore"):
            elam = np.exp(lam)
            ephi = np.exp(phi)
        value = (-self.totals @ lam + self.n_slots * np.sum(elam)
                 + 0.5 * cf.logdet + 0.5 * lam @ alpha
                 + np.sum(-self.shape * phi + self.rate * ephi))
        g_lam = -self.totals + self.n_slots * elam + alpha
        # 1/2 tr(Kinv dK) - 1/2 a' dK a  ==  1/2 sum((Kinv - a a') * dK)
        w = kinv - np.outer(alpha, alpha)
        g_phi = 0.5 * trace_products(w, hp, self.dists, kmat)
        g_phi += -self.shape + self.rate * ephi
        return float(value), np.concatenate([g_lam, g_phi])

    def grad(self, z) -> np.ndarray:
        return self.value_and_grad(z)[1]


def neg_log_posterior(state: UnconstrainedState, data: RequestMatrix, features,
                      priors: Sequence[GammaPrior] | None) -> float:
    model = PoissonGPModel(data, features, priors)
    return model.value(_packed(state, model))


def grad_neg_log_posterior(state: UnconstrainedState, data: RequestMatrix, features,
                           priors: Sequence[GammaPrior] | None) -> np.ndarray:
    model = PoissonGPModel(data, features, priors)
    return model.grad(_packed(state, model))


def _packed(state, model):
    if state.lam.size != model.n_contents or state.phi.size != model.n_features + 2:
        raise InvalidInputError("state dimensions do not match data and features")
    return state.pack()
