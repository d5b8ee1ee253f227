import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pgpcache.datagen import (
    REFERENCE_HP,
    CellGenConfig,
    FeatureDist,
    UserGenConfig,
    dirichlet_draw,
    gen_cell_level,
    gen_user_level,
)
from pgpcache.errors import InvalidInputError
from pgpcache.kernel import HyperParams
from pgpcache.posterior import mle_popularity


def test_config_validation():
    with pytest.raises(InvalidInputError):
        CellGenConfig(m_seen=1)
    with pytest.raises(InvalidInputError):
        CellGenConfig(unseen_fraction=-0.1)
    with pytest.raises(InvalidInputError):
        CellGenConfig(true_hp=HyperParams(0.1, [1.0, 1.0]))
    with pytest.raises(InvalidInputError):
        UserGenConfig(omega=0.0)
    with pytest.raises(InvalidInputError):
        UserGenConfig(users=0)
    with pytest.raises(InvalidInputError):
        FeatureDist("poisson").draw(3, np.random.default_rng(0))


def test_cell_degenerate_rate_one():
    cfg = CellGenConfig(m_seen=3, n_slots=10_000, unseen_fraction=0.0,
                        true_hp=HyperParams(1e-12, [1e-12, 1.0, 1.0, 1.0, 1.0]), seed=1)
    ds = gen_cell_level(cfg)
    assert np.all(np.abs(ds.true_lambdas) < 1e-4)
    assert 0.97 <= ds.requests.counts.mean() <= 1.03


def test_cell_constant_kernel_correlates_contents():
    hp = HyperParams(1e-6, [1.0, 0.0, 0.0, 0.0, 0.0])
    lam = np.array([gen_cell_level(CellGenConfig(m_seen=4, n_slots=1, true_hp=hp, seed=s)).true_lambdas
                    for s in range(200)])
    corr = np.corrcoef(lam.T)
    assert corr.min() > 0.99


def test_cell_lambda_moments_match_prior():
    lam = np.array([gen_cell_level(CellGenConfig(m_seen=10, n_slots=1, seed=s)).true_lambdas[0]
                    for s in range(200)])
    v = REFERENCE_HP.alphas[0] + REFERENCE_HP.eta
    assert abs(lam.mean()) <= 3 * math.sqrt(v / 200)
    assert abs(lam.var(ddof=1) - v) <= 3 * v * math.sqrt(2 / 199)


def test_cell_layout_and_unseen_split():
    ds = gen_cell_level(CellGenConfig(m_seen=40, n_slots=7, n_future=30, seed=2))
    assert ds.features.shape == (50, 4)
    assert ds.requests.counts.shape == (40, 7)
    np.testing.assert_array_equal(ds.seen_mask, np.arange(50) < 40)
    # the unseen rows follow the same feature distributions
    assert set(np.unique(ds.unseen_features[:, :3])) <= {0.0, 1.0}
    np.testing.assert_allclose(ds.true_popularities, np.exp(ds.true_lambdas))
    assert ds.future_counts.shape == (50,)
    np.testing.assert_allclose(ds.catalog.sizes, 1.0)


def test_generators_reproducible():
    for gen, cfg in ((gen_cell_level, CellGenConfig(m_seen=12, seed=9)),
                     (gen_user_level, UserGenConfig(m_seen=12, n_slots=5, seed=9))):
        a, b = gen(cfg), gen(cfg)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.requests.counts, b.requests.counts)
        np.testing.assert_array_equal(a.true_lambdas, b.true_lambdas)
        np.testing.assert_array_equal(a.catalog.sizes, b.catalog.sizes)


def test_truth_self_rmse_and_long_run_mle():
    ds = gen_cell_level(CellGenConfig(m_seen=3, n_slots=100_000, unseen_fraction=0.0, seed=4))
    r = ds.true_popularities
    assert np.sqrt(np.mean((r - r) ** 2)) == 0.0
    np.testing.assert_allclose(mle_popularity(ds.requests), r, rtol=0.01)


def test_dirichlet_single_dimension():
    np.testing.assert_array_equal(dirichlet_draw(1, 0.5, seed=0), [1.0])


@given(st.integers(1, 200), st.floats(1e-3, 1e3), st.integers(0, 2**31 - 1))
def test_dirichlet_on_simplex(dim, omega, seed):
    p = dirichlet_draw(dim, omega, seed=seed)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) <= 1e-12


def test_dirichlet_symmetric_mean():
    p = dirichlet_draw(3, 1.0, seed=0, size=100_000)
    np.testing.assert_allclose(p.mean(axis=0), 1 / 3, atol=0.01)


def stick_breaking(dim, omega, n, rng):
    """Symmetric Dirichlet draws from Beta stick-breaking."""
    out = np.empty((n, dim))
    rest = np.ones(n)
    for k in range(dim - 1):
        b = rng.beta(omega, omega * (dim - k - 1), n)
        out[:, k] = rest * b
        rest = rest * (1 - b)
    out[:, -1] = rest
    return out


def test_dirichlet_sparse_concentrates():
    # total concentration 1: the mean largest weight tends to the Golomb-Dickman constant 0.6243
    got = dirichlet_draw(100, 0.01, seed=0, size=1000).max(axis=1)
    ref = stick_breaking(100, 0.01, 20_000, np.random.default_rng(1)).max(axis=1)
    assert abs(got.mean() - ref.mean()) <= 4 * math.hypot(got.std() / math.sqrt(1000), ref.std() / math.sqrt(20_000))
    assert abs(ref.mean() - 0.6243) < 0.01
    assert dirichlet_draw(100, 0.001, seed=0, size=1000).max(axis=1).mean() > 0.9


def test_dirichlet_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        dirichlet_draw(0, 1.0)
    with pytest.raises(InvalidInputError):
        dirichlet_draw(3, 0.0)


def test_user_level_single_user_moments():
    cfg = lambda s: UserGenConfig(m_seen=4, n_slots=1, users=1, unseen_fraction=0.0, alpha0=0.8, seed=s)
    lam = np.array([gen_user_level(cfg(s)).true_lambdas[0] for s in range(300)])
    v = 0.8 + 1e-4
    assert abs(lam.mean()) <= 3 * math.sqrt(v / 300)
    assert abs(lam.var(ddof=1) - v) <= 3 * v * math.sqrt(2 / 299)


def test_user_level_concentrated_profiles_correlate():
    ds = gen_user_level(UserGenConfig(m_seen=60, n_slots=1, users=5, omega=1e4, seed=3))
    corr = np.corrcoef(ds.user_lambdas.T)
    assert corr.min() > 0.99


def test_user_level_poisson_additivity():
    ds = gen_user_level(UserGenConfig(m_seen=3, n_slots=10_000, users=4, unseen_fraction=0.0,
                                      alpha0=0.5, seed=8))
    expected = np.exp(ds.user_lambdas).sum(axis=1)
    counts = ds.requests.counts
    se = np.sqrt(expected / counts.shape[1])
    assert np.all(np.abs(counts.mean(axis=1) - expected) <= 3 * se)
    np.testing.assert_allclose(ds.true_popularities, expected)


def test_user_level_sizes_and_layout():
    ds = gen_user_level(UserGenConfig(m_seen=20, n_slots=5, seed=1))
    assert ds.features.shape == (25, 4)
    assert np.all((ds.catalog.sizes > 0) & (ds.catalog.sizes < 100))
    assert ds.user_lambdas.shape == (25, 10)
    assert ds.future_counts.shape == (25,)
