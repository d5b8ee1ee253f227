"""Synthetic request workloads.

Cell-level data follow the hierarchical model directly: features, a GP draw
``f`` over every content, ``lambda ~ N(f, eta)``, then Poisson counts per
slot for the seen contents.  User-level data draw one ``lambda`` per
(content, user) pair from a GP over the joint content/user feature space and
aggregate the per-user Poisson requests at the cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from pgpcache.cache import ContentCatalog
from pgpcache.errors import InvalidInputError
from pgpcache.kernel import HyperParams, kernel_matrix
from pgpcache.posterior import RequestMatrix


@dataclass(frozen=True)
class FeatureDist:
    """One feature column: ``bernoulli`` with success probability ``p``, or standard ``normal``."""

    kind: str
    p: float = 0.5

    def draw(self, n, rng) -> np.ndarray:
        if self.kind == "bernoulli":
            return (rng.random(n) < self.p).astype(float)
        if self.kind == "normal":
            return rng.standard_normal(n)
        raise InvalidInputError(f"unknown feature distribution {self.kind!r}")


REFERENCE_FEATURES = (
    FeatureDist("bernoulli", 0.5),
    FeatureDist("bernoulli", 0.8),
    FeatureDist("bernoulli", 0.2),
    FeatureDist("normal"),
)
REFERENCE_HP = HyperParams(1e-4, [0.1, 0.25, 0.0, 0.1, 0.5])

# default grids for the alpha0 / omega CHR sweep
ALPHA0_GRID = (0.001, 0.5, 1.0, 2.5, 5.0)
OMEGA_GRID = (0.01, 1.0, 100.0)


@dataclass(frozen=True)
class CellGenConfig:
    m_seen: int = 100
    n_slots: int = 20
    unseen_fraction: float = 0.25
    features: tuple = REFERENCE_FEATURES
    true_hp: HyperParams = REFERENCE_HP
    n_future: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.m_seen < 2 or self.n_slots < 1 or self.unseen_fraction < 0 or self.n_future < 0:
            raise InvalidInputError("need m_seen >= 2, n_slots >= 1, unseen_fraction >= 0")
        if self.true_hp.n_features != len(self.features):
            raise InvalidInputError("true_hp feature scales do not match the feature spec")

    @property
    def q_features(self) -> int:
        return len(self.features)


@dataclass(frozen=True)
class UserGenConfig:
    m_seen: int = 200
    n_slots: int = 40
    unseen_fraction: float = 0.25
    users: int = 10
    p_user_features: int = 100
    omega: float = 1.0
    alpha0: float = 2.5
    beta: float = 1.0
    content_alphas: tuple = (0.25, 0.0, 0.1, 0.5)
    eta: float = 1e-4
    features: tuple = REFERENCE_FEATURES
    size_range: tuple = (0.0, 100.0)
    n_future: int = 30
    seed: int = 0

    def __post_init__(self):
        if not self.omega > 0:
            raise InvalidInputError("Dirichlet parameter omega must be > 0")
        if self.users < 1 or self.p_user_features < 1:
            raise InvalidInputError("need at least one user and one user feature")
        if self.m_seen < 2 or self.n_slots < 1 or self.n_future < 0:
            raise InvalidInputError("need m_seen >= 2 and n_slots >= 1")
        if len(self.content_alphas) != len(self.features):
            raise InvalidInputError("content_alphas must match the feature spec")
        lo, hi = self.size_range
        if not 0 <= lo < hi:
            raise InvalidInputError("size_range must satisfy 0 <= low < high")

    @property
    def content_hp(self) -> HyperParams:
        return HyperParams(self.eta, [self.alpha0, *self.content_alphas])


@dataclass
class SyntheticDataset:
    """Features for every content, training requests for the seen ones.

    Ground truth (``true_lambdas``, ``true_popularities``) and held-out
    request totals (``future_counts``) are optional so that real workloads
    can share the same container.
    """

    features: np.ndarray
    requests: RequestMatrix
    catalog: ContentCatalog
    true_lambdas: np.ndarray | None = None
    true_popularities: np.ndarray | None = None
    future_counts: np.ndarray | None = None
    content_ids: np.ndarray | None = None
    user_lambdas: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.content_ids is None:
            self.content_ids = np.arange(self.features.shape[0])
        n_seen = int(self.catalog.seen_mask.sum())
        if self.requests.n_contents != n_seen:
            raise InvalidInputError(f"{self.requests.n_contents} request rows, {n_seen} seen contents")
        if self.features.shape[0] != self.catalog.n_contents:
            raise InvalidInputError("feature rows and catalog size differ")

    @property
    def seen_mask(self) -> np.ndarray:
        return self.catalog.seen_mask

    @property
    def seen_features(self) -> np.ndarray:
        return self.features[self.seen_mask]

    @property
    def unseen_features(self) -> np.ndarray:
        return self.features[~self.seen_mask]

    @property
    def n_seen(self) -> int:
        return int(self.seen_mask.sum())

    @property
    def n_slots(self) -> int:
        return self.requests.n_slots


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def draw_features(specs, n, rng) -> np.ndarray:
    return np.column_stack([spec.draw(n, rng) for spec in specs])


def _psd_root(cov) -> np.ndarray:
    """``A`` with ``A A' = cov`` for a possibly singular PSD matrix."""
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


def _n_unseen(m_seen, fraction):
    return int(np.floor(fraction * m_seen + 0.5))


def gen_cell_level(cfg: CellGenConfig) -> SyntheticDataset:
    rng = np.random.default_rng(cfg.seed)
    m_total = cfg.m_seen + _n_unseen(cfg.m_seen, cfg.unseen_fraction)
    x = draw_features(cfg.features, m_total, rng)
    hp = cfg.true_hp
    f = _psd_root(kernel_matrix(x, hp)) @ rng.standard_normal(m_total)
    lam = f + np.sqrt(hp.eta) * rng.standard_normal(m_total)
    rates = np.exp(lam)
    counts = rng.poisson(rates[: cfg.m_seen, None], size=(cfg.m_seen, cfg.n_slots))
    future = rng.poisson(cfg.n_future * rates) if cfg.n_future else None
    seen = np.arange(m_total) < cfg.m_seen
    return SyntheticDataset(
        features=x,
        requests=RequestMatrix(counts),
        catalog=ContentCatalog.uniform(seen),
        true_lambdas=lam,
        true_popularities=rates,
        future_counts=future,
        meta={"mode": "cell", "seed": cfg.seed, "theta": hp.theta.tolist(),
              "m_seen": cfg.m_seen, "n_slots": cfg.n_slots, "n_future": cfg.n_future},
    )


def dirichlet_draw(dim: int, omega: float, seed=None, size=None) -> np.ndarray:
    """Symmetric Dirichlet draw from normalised Gamma(omega, 1) variables.

    Gamma variates are generated in log space as
    ``log Gamma(omega + 1) + log(U) / omega`` so that tiny ``omega`` does not
    underflow every component to zero.
    """
    if dim < 1 or not omega > 0:
        raise InvalidInputError("need dim >= 1 and omega > 0")
    rng = _rng(seed)
    shape = (dim,) if size is None else (size, dim)
    log_g = np.log(rng.gamma(omega + 1.0, 1.0, size=shape)) + np.log(rng.random(shape)) / omega
    return np.exp(log_g - logsumexp(log_g, axis=-1, keepdims=True))


def gen_user_level(cfg: UserGenConfig) -> SyntheticDataset:
    rng = np.random.default_rng(cfg.seed)
    m_total = cfg.m_seen + _n_unseen(cfg.m_seen, cfg.unseen_fraction)
    x = draw_features(cfg.features, m_total, rng)
    profiles = dirichlet_draw(cfg.p_user_features, cfg.omega, rng, size=cfg.users)

    # joint kernel = alpha0 * (content kernel) kron (user kernel)
    unit = HyperParams(cfg.eta, [1.0, *cfg.content_alphas])
    root_x = _psd_root(kernel_matrix(x, unit))
    diff = profiles[:, None, :] - profiles[None, :, :]
    root_u = _psd_root(np.exp(-cfg.beta * np.sum(diff * diff, axis=-1)))
    z = rng.standard_normal((m_total, cfg.users))
    f = np.sqrt(cfg.alpha0) * root_x @ z @ root_u.T
    lam_mu = f + np.sqrt(cfg.eta) * rng.standard_normal((m_total, cfg.users))
    rates_mu = np.exp(lam_mu)

    per_user = rng.poisson(rates_mu[: cfg.m_seen, :, None],
                           size=(cfg.m_seen, cfg.users, cfg.n_slots))
    counts = per_user.sum(axis=1)
    popularity = rates_mu.sum(axis=1)
    future = rng.poisson(cfg.n_future * popularity) if cfg.n_future else None
    lo, hi = cfg.size_range
    sizes = rng.uniform(np.nextafter(lo, hi), hi, size=m_total)
    seen = np.arange(m_total) < cfg.m_seen
    return SyntheticDataset(
        features=x,
        requests=RequestMatrix(counts),
        catalog=ContentCatalog(sizes, seen),
        true_lambdas=np.log(popularity),
        true_popularities=popularity,
        future_counts=future,
        meta={"mode": "user", "seed": cfg.seed, "omega": cfg.omega, "alpha0": cfg.alpha0,
              "users": cfg.users, "m_seen": cfg.m_seen, "n_slots": cfg.n_slots,
              "n_future": cfg.n_future, "theta": cfg.content_hp.theta.tolist()},
        user_lambdas=lam_mu,
    )
