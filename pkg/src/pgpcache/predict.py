"""Posterior predictive summaries for next-slot request counts.

Type 1 covers contents with training requests; Type 2 covers unseen contents,
whose natural parameter is obtained by Gaussian conditioning on the seen ones.
Means are the quadratic-loss point predictions; variances add the Poisson
noise to the spread of the rate (law of total variance).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from pgpcache.errors import InvalidInputError
from pgpcache.hmc import PosteriorSamples
from pgpcache.kernel import (
    CovFactor,
    HyperParams,
    as_features,
    build_cov,
    cross_kernel,
    solve_with,
)
from pgpcache.vb import VariationalPosterior

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12
# thinned draws kept for Type-2 prediction when no stride is given
TARGET_TYPE2_DRAWS = 250


@dataclass(frozen=True)
class Prediction:
    mean: float
    variance: float
    backend: str
    kind: str
    clamped: bool = False

    def __post_init__(self):
        if not (self.mean >= 0 and self.variance >= 0):
            raise InvalidInputError("prediction mean and variance must be >= 0")
        if self.backend not in ("HMC", "VB") or self.kind not in ("Type1", "Type2"):
            raise InvalidInputError(f"bad prediction tags {self.backend}/{self.kind}")


def _lognormal_poisson_var(mu, sigma):
    return np.expm1(sigma) * np.exp(2 * mu + sigma) + np.exp(mu + 0.5 * sigma)


def type1_vb(vp: VariationalPosterior):
    """Per-content ``(mean, variance)`` arrays for seen contents under ``q``."""
    return np.exp(vp.mu + 0.5 * vp.sigma), _lognormal_poisson_var(vp.mu, vp.sigma)


def type1_hmc(samples: PosteriorSamples):
    if samples.n_draws < 1:
        raise InvalidInputError("need at least one draw")
    rates = np.exp(samples.lambda_draws)
    mean = rates.mean(axis=0)
    return mean, np.maximum((rates * rates).mean(axis=0) - mean * mean, 0.0) + mean


def _check_index(m, size):
    if not (isinstance(m, (int, np.integer)) and 0 <= m < size):
        raise InvalidInputError(f"content index {m!r} out of range [0, {size})")


def predict_seen(posterior, m: int) -> Prediction:
    """Type-1 prediction for seen content ``m`` from either backend's output."""
    if isinstance(posterior, VariationalPosterior):
        _check_index(m, posterior.n_contents)
        mean, var = type1_vb(posterior)
        return Prediction(float(mean[m]), float(var[m]), "VB", "Type1")
    if isinstance(posterior, PosteriorSamples):
        _check_index(m, posterior.lambda_draws.shape[1])
        mean, var = type1_hmc(posterior)
        return Prediction(float(mean[m]), float(var[m]), "HMC", "Type1")
    raise InvalidInputError(f"unsupported posterior type {type(posterior).__name__}")


def _new_matrix(new_features, q):
    new = np.asarray(new_features, dtype=float)
    single = new.ndim == 1
    new = np.atleast_2d(new)
    if new.shape[1] != q:
        raise InvalidInputError(f"new contents have {new.shape[1]} features, expected {q}")
    return new, single


def _condition(x, new, lam, hp, cf: CovFactor | None = None):
    """Conditional means, variances and the weights ``Kinv k`` for each new row."""
    cf = build_cov(x, hp) if cf is None else cf
    k = cross_kernel(x, new, hp)
    w = solve_with(cf, k)
    mean = w.T @ lam
    var = hp.alphas[0] + hp.eta - np.einsum("mj,mj->j", k, w)
    return mean, np.maximum(var, VARIANCE_FLOOR), w


def gp_condition(new_features, lam, hp: HyperParams, features):
    """Normal conditional of ``lambda_new`` given the seen ``lambda``.

    Returns ``(mean, variance)``: scalars for a single feature vector,
    arrays for a matrix of new contents.
    """
    x = as_features(features)
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (x.shape[0],):
        raise InvalidInputError(f"lambda has shape {lam.shape}, expected ({x.shape[0]},)")
    if hp.n_features != x.shape[1]:
        raise InvalidInputError("hyperparameters do not match the feature dimension")
    new, single = _new_matrix(new_features, x.shape[1])
    mean, var, _ = _condition(x, new, lam, hp)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def type2_hmc(samples: PosteriorSamples, new_features, features, stride: int | None = None):
    """Per-new-content ``(mean, variance)`` averaged over thinned posterior draws.

    Each retained draw rebuilds the covariance with its own hyperparameters.
    ``stride=None`` thins to roughly 250 draws.
    """
    x = as_features(features)
    if samples.n_draws < 1:
        raise InvalidInputError("need at least one draw")
    if samples.lambda_draws.shape[1] != x.shape[0]:
        raise InvalidInputError("draws and training features disagree on the content count")
    new, _ = _new_matrix(new_features, x.shape[1])
    if new.shape[0] == 0:
        return np.empty(0), np.empty(0)
    if stride is None:
        stride = max(1, samples.n_draws // TARGET_TYPE2_DRAWS)
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    idx = np.arange(0, samples.n_draws, stride)
    first = np.empty((idx.size, new.shape[0]))
    second = np.empty_like(first)
    for row, s in enumerate(idx):
        mean, var, _ = _condition(x, new, samples.lambda_draws[s], samples.hyper(s))
        first[row] = np.exp(mean + 0.5 * var)
        second[row] = np.exp(2 * mean + 2 * var)
    m1 = first.mean(axis=0)
    m2 = second.mean(axis=0)
    return m1, np.maximum(m2 - m1 * m1, 0.0) + m1


def type2_vb(vp: VariationalPosterior, new_features, features, subtract_correction: bool = False):
    """Per-new-content ``(mean, variance, clamped)`` at the fitted hyperparameters.

    Averaging the conditional over ``lambda ~ q`` gives the log-rate variance
    ``s + w' Sigma w`` with ``w = Kinv k``.  ``subtract_correction=True``
    uses ``s - w' Sigma w`` instead, clamped at a tiny floor; that variant
    underestimates the spread and is kept only for comparison.
    """
    x = as_features(features)
    if vp.n_contents != x.shape[0]:
        raise InvalidInputError("posterior and training features disagree on the content count")
    new, _ = _new_matrix(new_features, x.shape[1])
    if new.shape[0] == 0:
        return np.empty(0), np.empty(0), np.zeros(0, dtype=bool)
    mean, var, w = _condition(x, new, vp.mu, vp.theta)
    correction = np.einsum("mj,m,mj->j", w, vp.sigma, w)
    if subtract_correction:
        var = var - correction
        clamped = var < VARIANCE_FLOOR
        if clamped.any():
            log.warning("%d Type-2 variances clamped at %g", int(clamped.sum()), VARIANCE_FLOOR)
        var = np.maximum(var, VARIANCE_FLOOR)
    else:
        var = var + correction
        clamped = np.zeros(var.size, dtype=bool)
    return np.exp(mean + 0.5 * var), _lognormal_poisson_var(mean, var), clamped


def predict_unseen_hmc(samples: PosteriorSamples, new_features, features,
                       stride: int | None = None) -> Prediction:
    new = np.asarray(new_features, dtype=float)
    if new.ndim != 1:
        raise InvalidInputError("predict_unseen_hmc takes one feature vector; use type2_hmc for many")
    mean, var = type2_hmc(samples, new, features, stride)
    return Prediction(float(mean[0]), float(var[0]), "HMC", "Type2")


def predict_unseen_vb(vp: VariationalPosterior, new_features, features,
                      subtract_correction: bool = False) -> Prediction:
    new = np.asarray(new_features, dtype=float)
    if new.ndim != 1:
        raise InvalidInputError("predict_unseen_vb takes one feature vector; use type2_vb for many")
    mean, var, clamped = type2_vb(vp, new, features, subtract_correction)
    return Prediction(float(mean[0]), float(var[0]), "VB", "Type2", bool(clamped[0]))


def predict_all(posterior, features, unseen_features=None, stride: int | None = None):
    """Mean predictions for seen contents followed by unseen ones."""
    if isinstance(posterior, VariationalPosterior):
        seen = type1_vb(posterior)[0]
        unseen = (type2_vb(posterior, unseen_features, features)[0]
                  if unseen_features is not None and len(unseen_features) else np.empty(0))
    elif isinstance(posterior, PosteriorSamples):
        seen = type1_hmc(posterior)[0]
        unseen = (type2_hmc(posterior, unseen_features, features, stride)[0]
                  if unseen_features is not None and len(unseen_features) else np.empty(0))
    else:
        raise InvalidInputError(f"unsupported posterior type {type(posterior).__name__}")
    return np.concatenate([seen, unseen])
