"""Hamiltonian Monte Carlo over ``z = [lambda, log theta]``.

The sampler works on any *target* exposing ``value_and_grad(z) -> (float, ndarray)``
and ``dim``; :class:`pgpcache.posterior.PoissonGPModel` is the production target.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pgpcache.errors import (
    IntegratorDivergence,
    InvalidInputError,
    NumericalFailureError,
    SamplerFailureError,
)
from pgpcache.kernel import HyperParams
from pgpcache.posterior import GammaPrior, PoissonGPModel, RequestMatrix, UnconstrainedState

log = logging.getLogger(__name__)

DIVERGENCE_WINDOW = 100


@dataclass(frozen=True)
class HmcConfig:
    step_size: float = 0.015
    leapfrog_steps: int = 20
    num_samples: int = 2500
    burn_in: int = 2500
    mass: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.step_size > 0:
            raise InvalidInputError("step_size must be > 0")
        if self.leapfrog_steps < 1 or self.num_samples < 1 or self.burn_in < 0:
            raise InvalidInputError("leapfrog_steps and num_samples must be >= 1, burn_in >= 0")
        if self.mass is not None and np.any(np.asarray(self.mass) <= 0):
            raise InvalidInputError("mass entries must be > 0")

    def mass_vector(self, dim: int) -> np.ndarray:
        if self.mass is None:
            return np.ones(dim)
        mass = np.broadcast_to(np.asarray(self.mass, dtype=float), (dim,))
        return np.array(mass)


@dataclass
class ChainResult:
    draws: np.ndarray
    accepted: np.ndarray
    energies: np.ndarray
    n_divergent: int

    @property
    def accept_rate(self) -> float:
        return float(np.mean(self.accepted))


@dataclass
class PosteriorSamples:
    """Post burn-in draws of ``lambda`` and ``phi = log theta``."""

    lambda_draws: np.ndarray
    phi_draws: np.ndarray
    accept_rate: float
    energy_trace: np.ndarray
    accepted: np.ndarray = field(default=None)
    n_divergent: int = 0

    @property
    def n_draws(self) -> int:
        return self.lambda_draws.shape[0]

    def hyper(self, s: int) -> HyperParams:
        return HyperParams.from_log(self.phi_draws[s])

    def theta_mean(self) -> np.ndarray:
        """Posterior mean of ``theta = [eta, alpha_0, ...]`` (mean of ``exp(phi)``)."""
        return np.exp(self.phi_draws).mean(axis=0)


def kinetic(p, mass) -> float:
    return 0.5 * float(np.sum(p * p / mass))


def hamiltonian(z, p, target, mass=None) -> float:
    """Potential plus Gaussian momentum energy, normaliser included."""
    z = np.asarray(z, dtype=float)
    p = np.asarray(p, dtype=float)
    if p.shape != z.shape:
        raise InvalidInputError("momentum and position lengths differ")
    mass = np.ones(z.size) if mass is None else np.asarray(mass, dtype=float)
    potential, _ = target.value_and_grad(z)
    const = 0.5 * (z.size * np.log(2 * np.pi) + np.sum(np.log(mass)))
    return potential + const + kinetic(p, mass)


def _checked(target, z):
    try:
        u, g = target.value_and_grad(z)
    except NumericalFailureError as exc:
        raise IntegratorDivergence(f"potential evaluation failed: {exc}") from exc
    if not (np.isfinite(u) and np.all(np.isfinite(g))):
        raise IntegratorDivergence("non-finite potential or gradient")
    return u, g


def _integrate(z, p, target, step_size, n_steps, mass, grad0=None):
    z = np.array(z, dtype=float)
    p = np.array(p, dtype=float)
    g = _checked(target, z)[1] if grad0 is None else grad0
    u = None
    for _ in range(n_steps):
        p -= 0.5 * step_size * g
        z += step_size * p / mass
        u, g = _checked(target, z)
        p -= 0.5 * step_size * g
    return z, p, u, g


def leapfrog(z, p, target, step_size: float, n_steps: int, mass=None):
    """``n_steps`` half-kick / drift / half-kick updates; returns the final ``(z, p)``."""
    z = np.asarray(z, dtype=float)
    mass = np.ones(z.size) if mass is None else np.asarray(mass, dtype=float)
    z1, p1, _, _ = _integrate(z, p, target, step_size, n_steps, mass)
    return z1, p1


def run_chain(target, cfg: HmcConfig, init) -> ChainResult:
    """Draw ``cfg.num_samples`` states after discarding ``cfg.burn_in`` iterations.

    A trajectory with non-finite energy counts as a rejection.  If every
    trajectory in a window of 100 iterations diverges the chain is declared
    dead.
    """
    z = np.array(init, dtype=float)
    if z.shape != (target.dim,) or not np.all(np.isfinite(z)):
        raise InvalidInputError("initial state must be finite with length target.dim")
    mass = cfg.mass_vector(z.size)
    sqrt_mass = np.sqrt(mass)
    const = 0.5 * (z.size * np.log(2 * np.pi) + np.sum(np.log(mass)))
    rng = np.random.default_rng(cfg.seed)

    u, g = target.value_and_grad(z)
    if not (np.isfinite(u) and np.all(np.isfinite(g))):
        raise InvalidInputError("initial state has non-finite potential")

    total = cfg.burn_in + cfg.num_samples
    draws = np.empty((cfg.num_samples, z.size))
    accepted = np.zeros(cfg.num_samples, dtype=bool)
    energies = np.empty(cfg.num_samples)
    n_div = 0
    window_div = 0
    for it in range(total):
        p0 = sqrt_mass * rng.standard_normal(z.size)
        h0 = u + const + kinetic(p0, mass)
        log_u = np.log(rng.random())
        ok = False
        h_keep = h0
        try:
            z1, p1, u1, g1 = _integrate(z, p0, target, cfg.step_size, cfg.leapfrog_steps, mass, g)
            h1 = u1 + const + kinetic(p1, mass)
            ok = bool(np.isfinite(h1)) and log_u < -(h1 - h0)
        except IntegratorDivergence:
            n_div += 1
            window_div += 1
        if ok:
            z, u, g = z1, u1, g1
            h_keep = h1
        if (it + 1) % DIVERGENCE_WINDOW == 0:
            if window_div > 0.99 * DIVERGENCE_WINDOW:
                raise SamplerFailureError(
                    f"acceptance collapsed: {window_div}/{DIVERGENCE_WINDOW} trajectories "
                    f"diverged; reduce step_size (currently {cfg.step_size})"
                )
            window_div = 0
        k = it - cfg.burn_in
        if k >= 0:
            draws[k] = z
            accepted[k] = ok
            energies[k] = h_keep
    if n_div:
        log.info("%d of %d trajectories diverged", n_div, total)
    return ChainResult(draws, accepted, energies, n_div)


def initial_state(data: RequestMatrix, n_features: int) -> UnconstrainedState:
    """Smoothed log-MLE for ``lambda`` and ``theta = 1``."""
    lam = np.log((data.totals + 0.5) / data.n_slots)
    return UnconstrainedState(lam, np.zeros(n_features + 2))


def sample(data: RequestMatrix, features, priors: Sequence[GammaPrior] | None,
           cfg: HmcConfig | None = None, init: UnconstrainedState | None = None) -> PosteriorSamples:
    cfg = cfg or HmcConfig()
    model = PoissonGPModel(data, features, priors)
    if init is None:
        init = initial_state(data, model.n_features)
    res = run_chain(model, cfg, init.pack())
    m = model.n_contents
    return PosteriorSamples(
        lambda_draws=res.draws[:, :m],
        phi_draws=res.draws[:, m:],
        accept_rate=res.accept_rate,
        energy_trace=res.energies,
        accepted=res.accepted,
        n_divergent=res.n_divergent,
    )


def posterior_mean_rates(samples: PosteriorSamples) -> np.ndarray:
    """Monte Carlo estimate of the expected next-slot count, ``mean_s exp(lambda_s)``."""
    if samples.n_draws < 1:
        raise InvalidInputError("need at least one draw")
    return np.exp(samples.lambda_draws).mean(axis=0)


def write_draws_csv(samples: PosteriorSamples, path, hamiltonians=None) -> None:
    m = samples.lambda_draws.shape[1]
    n_phi = samples.phi_draws.shape[1]
    header = (["draw"] + [f"lambda_{i + 1}" for i in range(m)]
              + [f"phi_{q}" for q in range(n_phi)] + ["accepted", "H"])
    energies = samples.energy_trace if hamiltonians is None else hamiltonians
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in range(samples.n_draws):
            w.writerow([s] + [repr(float(v)) for v in samples.lambda_draws[s]]
                       + [repr(float(v)) for v in samples.phi_draws[s]]
                       + [int(samples.accepted[s]), repr(float(energies[s]))])
