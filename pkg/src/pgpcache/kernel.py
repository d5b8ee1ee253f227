"""Squared-exponential kernel with per-feature relevance scales.

The regularised covariance used throughout the package is

    Ktilde = K + eta * I,   K[i, j] = alpha_0 * exp(-sum_q alpha_q (x_qi - x_qj)^2)

Hyperparameters are ordered ``theta = [eta, alpha_0, alpha_1, ..., alpha_Q]``
and every derivative is taken with respect to ``phi = log(theta)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from pgpcache.errors import InvalidInputError, NumericalFailureError

__all__ = [
    "HyperParams",
    "CovFactor",
    "as_features",
    "sq_dists",
    "sek_entry",
    "kernel_matrix",
    "cross_kernel",
    "build_cov",
    "cov_grad",
    "cov_grads",
    "solve_with",
    "diag_of_inverse",
    "inverse",
    "trace_products",
]

JITTER_START = 1e-10
JITTER_STOP = 1e-4


@dataclass(frozen=True)
class HyperParams:
    """Observation-level variance ``eta`` and kernel scales ``alphas``.

    ``alphas[0]`` is the vertical scale, ``alphas[1:]`` the per-feature
    horizontal scales (zero switches a feature off).
    """

    eta: float
    alphas: np.ndarray

    def __post_init__(self):
        alphas = np.atleast_1d(np.asarray(self.alphas, dtype=float)).copy()
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "eta", float(self.eta))
        if alphas.size < 2:
            raise InvalidInputError("alphas needs alpha_0 plus at least one feature scale")
        if not (np.isfinite(self.eta) and self.eta > 0):
            raise InvalidInputError(f"eta must be finite and > 0, got {self.eta}")
        if not np.all(np.isfinite(alphas)):
            raise InvalidInputError("alphas must be finite")
        if alphas[0] <= 0:
            raise InvalidInputError(f"alpha_0 must be > 0, got {alphas[0]}")
        if np.any(alphas[1:] < 0):
            raise InvalidInputError("feature scales alpha_q must be >= 0")

    @property
    def n_features(self) -> int:
        return self.alphas.size - 1

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([[self.eta], self.alphas])

    def to_log(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.theta)

    @classmethod
    def from_theta(cls, theta) -> "HyperParams":
        theta = np.asarray(theta, dtype=float)
        return cls(theta[0], theta[1:])

    @classmethod
    def from_log(cls, phi) -> "HyperParams":
        return cls.from_theta(np.exp(np.asarray(phi, dtype=float)))


@dataclass(frozen=True)
class CovFactor:
    """Cholesky factorisation of ``Ktilde`` (immutable, shareable)."""

    ktilde: np.ndarray
    chol: np.ndarray
    logdet: float
    jitter: float = 0.0

    @property
    def size(self) -> int:
        return self.ktilde.shape[0]


def as_features(features) -> np.ndarray:
    """Validate and return an ``(M, Q)`` float feature matrix."""
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise InvalidInputError(f"feature matrix must be (M, Q) with M, Q >= 1, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("feature matrix has non-finite entries")
    return x


def sq_dists(features, other=None) -> np.ndarray:
    """Per-feature squared differences, shape ``(Q, M, M')``."""
    x = as_features(features)
    y = x if other is None else as_features(other)
    if y.shape[1] != x.shape[1]:
        raise InvalidInputError("feature dimension mismatch")
    diff = x.T[:, :, None] - y.T[:, None, :]
    return diff * diff


def _check_dims(hp: HyperParams, q: int):
    if hp.n_features != q:
        raise InvalidInputError(
            f"hyperparameters carry {hp.n_features} feature scales, features have {q}"
        )


def sek_entry(xi, xj, hp: HyperParams) -> float:
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    xj = np.atleast_1d(np.asarray(xj, dtype=float))
    if xi.shape != xj.shape or xi.ndim != 1:
        raise InvalidInputError("feature vectors must have equal length")
    _check_dims(hp, xi.size)
    d = xi - xj
    return float(hp.alphas[0] * np.exp(-np.sum(hp.alphas[1:] * (d * d))))


def kernel_matrix(features, hp: HyperParams, dists=None) -> np.ndarray:
    """Unregularised kernel ``K`` (no ``eta`` on the diagonal)."""
    if dists is None:
        dists = sq_dists(features)
    _check_dims(hp, dists.shape[0])
    expo = np.tensordot(hp.alphas[1:], dists, axes=1)
    return hp.alphas[0] * np.exp(-expo)


def cross_kernel(features, new_features, hp: HyperParams) -> np.ndarray:
    """``K(x_i, x_new_j)`` for training rows ``i`` and new rows ``j``: shape ``(M, M_new)``."""
    return kernel_matrix(None, hp, dists=sq_dists(features, new_features))


def _try_cholesky(a):
    try:
        return linalg.cholesky(a, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        return None


def build_cov(features, hp: HyperParams, jitter: float = 0.0, dists=None,
              kmat=None) -> CovFactor:
    """Factor ``Ktilde = K + (eta + jitter) I``.

    When the first factorisation fails, jitter escalates by decades from
    ``1e-10 * trace(K) / M`` to ``1e-4 * trace(K) / M`` before giving up.
    """
    if jitter < 0:
        raise InvalidInputError("jitter must be >= 0")
    k = kernel_matrix(features, hp, dists) if kmat is None else kmat
    m = k.shape[0]
    if not np.all(np.isfinite(k)):
        raise NumericalFailureError("kernel matrix has non-finite entries", jitter=jitter)
    scale = np.trace(k) / m
    ladder = [jitter]
    j = max(jitter * 10, JITTER_START * scale)
    while j <= JITTER_STOP * scale * (1 + 1e-9):
        ladder.append(j)
        j *= 10
    for jit in ladder:
        kt = k.copy()
        kt[np.diag_indices(m)] += hp.eta + jit
        chol = _try_cholesky(kt)
        if chol is not None:
            logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
            return CovFactor(kt, chol, logdet, jit)
    raise NumericalFailureError(
        f"Cholesky failed up to jitter {ladder[-1]:.3g}", jitter=ladder[-1]
    )


def cov_grads(features, hp: HyperParams, dists=None, kmat=None) -> np.ndarray:
    """All log-parameter derivatives of ``Ktilde``, shape ``(Q + 2, M, M)``."""
    if dists is None:
        dists = sq_dists(features)
    if kmat is None:
        kmat = kernel_matrix(features, hp, dists)
    m = kmat.shape[0]
    out = np.empty((hp.n_features + 2, m, m))
    out[0] = hp.eta * np.eye(m)
    out[1] = kmat
    out[2:] = -hp.alphas[1:, None, None] * dists * kmat[None]
    return out


def cov_grad(features, hp: HyperParams, which: int, dists=None) -> np.ndarray:
    """Derivative of ``Ktilde`` with respect to ``log theta[which]``.

    ``which`` indexes ``[eta, alpha_0, alpha_1, ..., alpha_Q]``.
    """
    n_par = hp.n_features + 2
    if isinstance(which, (bool, np.bool_)) or not isinstance(which, (int, np.integer)):
        raise InvalidInputError(f"parameter index must be an int, got {which!r}")
    if not 0 <= which < n_par:
        raise InvalidInputError(f"parameter index {which} outside 0..{n_par - 1}")
    if dists is None:
        dists = sq_dists(features)
    m = dists.shape[1]
    if which == 0:
        return hp.eta * np.eye(m)
    kmat = kernel_matrix(features, hp, dists)
    if which == 1:
        return kmat
    return -hp.alphas[which - 1] * dists[which - 2] * kmat


def solve_with(cf: CovFactor, b) -> np.ndarray:
    """``Ktilde^{-1} b`` through the Cholesky factor."""
    return linalg.cho_solve((cf.chol, True), np.asarray(b, dtype=float), check_finite=False)


def diag_of_inverse(cf: CovFactor, block: int = 256) -> np.ndarray:
    """Diagonal of ``Ktilde^{-1}``, built from column blocks of ``L^{-1}``."""
    m = cf.size
    out = np.empty(m)
    for start in range(0, m, block):
        stop = min(start + block, m)
        rhs = np.zeros((m, stop - start))
        rhs[np.arange(start, stop), np.arange(stop - start)] = 1.0
        cols = linalg.solve_triangular(cf.chol, rhs, lower=True, check_finite=False)
        # diag(K^-1)_i = sum_k (L^-1)_{k i}^2
        out[start:stop] = np.sum(cols * cols, axis=0)
    return out


def inverse(cf: CovFactor) -> np.ndarray:
    """Explicit ``Ktilde^{-1}``; used only where every entry is needed (trace terms)."""
    low, info = lapack.dpotri(cf.chol, lower=1)
    if info != 0:
        raise NumericalFailureError(f"dpotri failed with info={info}")
    return np.tril(low) + np.tril(low, -1).T


def trace_products(w, hp: HyperParams, dists, kmat) -> np.ndarray:
    """``sum(w * dKtilde/dphi_q)`` for every log-parameter, without forming the derivatives.

    Matches ``np.einsum("ij,qij->q", w, cov_grads(...))`` for symmetric ``w``.
    """
    wk = w * kmat
    q = dists.shape[0]
    out = np.empty(q + 2)
    out[0] = hp.eta * np.trace(w)
    out[1] = wk.sum()
    out[2:] = -hp.alphas[1:] * (dists.reshape(q, -1) @ wk.ravel())
    return out
