import math
import time

import numpy as np
import pytest

from pgpcache.errors import IntegratorDivergence, InvalidInputError, SamplerFailureError
from pgpcache.hmc import (
    HmcConfig,
    PosteriorSamples,
    hamiltonian,
    initial_state,
    leapfrog,
    posterior_mean_rates,
    run_chain,
    sample,
    write_draws_csv,
)
from pgpcache.posterior import PoissonGPModel, RequestMatrix, default_priors


class GaussianTarget:
    """psi(q) = |q|^2 / 2."""

    def __init__(self, dim=2):
        self.dim = dim

    def value_and_grad(self, z):
        z = np.asarray(z, dtype=float)
        return 0.5 * float(z @ z), z.copy()


class OverflowTarget(GaussianTarget):
    """Finite near the origin, non-finite once any coordinate leaves [-3, 3]."""

    def value_and_grad(self, z):
        if np.any(np.abs(z) > 3):
            return np.inf, np.full(self.dim, np.nan)
        return super().value_and_grad(z)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        HmcConfig(step_size=0)
    with pytest.raises(InvalidInputError):
        HmcConfig(leapfrog_steps=0)
    with pytest.raises(InvalidInputError):
        HmcConfig(mass=np.array([1.0, -1.0]))
    cfg = HmcConfig()
    assert (cfg.step_size, cfg.leapfrog_steps) == (0.015, 20)
    assert cfg.num_samples + cfg.burn_in == 5000


def test_hamiltonian_zero_momentum():
    t = GaussianTarget(3)
    z = np.array([0.5, -1.0, 2.0])
    assert hamiltonian(z, np.zeros(3), t) == pytest.approx(0.5 * z @ z + 1.5 * math.log(2 * math.pi))


def test_hamiltonian_kinetic_quadratic():
    t = GaussianTarget(2)
    z = np.zeros(2)
    base = hamiltonian(z, np.zeros(2), t)
    k1 = hamiltonian(z, np.array([0.3, -0.7]), t) - base
    k2 = hamiltonian(z, np.array([0.6, -1.4]), t) - base
    assert k2 == pytest.approx(4 * k1, rel=1e-12)


def test_hamiltonian_unit_momentum_d2():
    t = GaussianTarget(2)
    h = hamiltonian(np.zeros(2), np.ones(2), t)
    assert h == pytest.approx(1 + math.log(2 * math.pi), rel=1e-14)


def test_hamiltonian_mass_inverse_in_kinetic():
    t = GaussianTarget(2)
    mass = np.array([2.0, 4.0])
    p = np.array([2.0, 2.0])
    h = hamiltonian(np.zeros(2), p, t, mass)
    const = 0.5 * (2 * math.log(2 * math.pi) + math.log(8.0))
    assert h == pytest.approx(const + 0.5 * (4 / 2 + 4 / 4), rel=1e-14)


def test_leapfrog_one_step_closed_form():
    q, p = leapfrog([1.0], [0.0], GaussianTarget(1), 0.1, 1)
    # half kick, drift, half kick on a unit harmonic oscillator
    p_half = 0.0 - 0.05 * 1.0
    q1 = 1.0 + 0.1 * p_half
    p1 = p_half - 0.05 * q1
    assert q[0] == pytest.approx(q1, abs=1e-15) and q1 == pytest.approx(0.995)
    assert p[0] == pytest.approx(p1, abs=1e-15)


def test_leapfrog_tiny_step_is_identity():
    z0, p0 = np.array([0.4, -1.2]), np.array([1.0, 0.5])
    z, p = leapfrog(z0, p0, GaussianTarget(2), 1e-12, 5)
    np.testing.assert_allclose(z, z0, atol=1e-10)
    np.testing.assert_allclose(p, p0, atol=1e-10)


def test_leapfrog_energy_error_second_order():
    t = GaussianTarget(1)
    errs = []
    for eps in (0.1, 0.05):
        n = int(round(1.0 / eps))
        z, p = leapfrog([1.0], [0.0], t, eps, n)
        errs.append(abs(hamiltonian(z, p, t) - hamiltonian([1.0], [0.0], t)))
    assert errs[1] < errs[0] / 3


def test_leapfrog_divergence_raises():
    with pytest.raises(IntegratorDivergence):
        leapfrog([2.9], [50.0], OverflowTarget(1), 0.1, 5)


def test_reversibility_random(rng):
    start = time.perf_counter()
    data = RequestMatrix(rng.poisson(2, size=(5, 4)))
    model = PoissonGPModel(data, rng.normal(size=(5, 2)), default_priors(2))
    for _ in range(100):
        z0 = initial_state(data, 2).pack() + 0.1 * rng.normal(size=model.dim)
        p0 = rng.normal(size=model.dim)
        z1, p1 = leapfrog(z0, p0, model, 0.01, 20)
        z2, p2 = leapfrog(z1, -p1, model, 0.01, 20)
        np.testing.assert_allclose(z2, z0, atol=1e-8)
        np.testing.assert_allclose(-p2, p0, atol=1e-8)
    assert time.perf_counter() - start < 5


def test_gaussian_calibration():
    res = run_chain(GaussianTarget(2), HmcConfig(step_size=0.1, leapfrog_steps=20,
                                                 num_samples=5000, burn_in=500, seed=4),
                    np.zeros(2))
    np.testing.assert_allclose(res.draws.mean(axis=0), 0.0, atol=0.05)
    np.testing.assert_allclose(np.cov(res.draws.T), np.eye(2), atol=0.1)


def test_burn_in_discarded_and_deterministic():
    cfg = HmcConfig(step_size=0.2, leapfrog_steps=5, num_samples=37, burn_in=11, seed=9)
    a = run_chain(GaussianTarget(2), cfg, np.ones(2))
    b = run_chain(GaussianTarget(2), cfg, np.ones(2))
    assert a.draws.shape == (37, 2) and a.accepted.shape == (37,) and a.energies.shape == (37,)
    np.testing.assert_array_equal(a.draws, b.draws)
    np.testing.assert_array_equal(a.energies, b.energies)


def test_huge_step_rejects_nearly_everything():
    res = run_chain(GaussianTarget(2), HmcConfig(step_size=10.0, leapfrog_steps=20,
                                                 num_samples=500, burn_in=0, seed=1),
                    np.zeros(2))
    assert res.accept_rate < 0.05


def test_divergent_trajectories_are_rejections():
    res = run_chain(OverflowTarget(2), HmcConfig(step_size=0.5, leapfrog_steps=10,
                                                 num_samples=300, burn_in=0, seed=2),
                    np.zeros(2))
    assert res.n_divergent > 0
    assert np.all(np.abs(res.draws) <= 3)
    assert np.all(np.isfinite(res.energies))


def test_collapsed_chain_raises():
    class AlwaysBad(GaussianTarget):
        def value_and_grad(self, z):
            if np.any(z != 0):
                return np.inf, np.full(self.dim, np.inf)
            return 0.0, np.zeros(self.dim)

    with pytest.raises(SamplerFailureError, match="acceptance collapsed"):
        run_chain(AlwaysBad(2), HmcConfig(num_samples=200, burn_in=0), np.zeros(2))


def test_energy_conservation_small_step(rng):
    t = GaussianTarget(2)
    small = 0
    for _ in range(300):
        z0, p0 = rng.normal(size=2), rng.normal(size=2)
        z1, p1 = leapfrog(z0, p0, t, 0.001, 10)
        small += abs(hamiltonian(z1, p1, t) - hamiltonian(z0, p0, t)) < 1e-4
    assert small >= 0.99 * 300


def _accept_prob(t, z, p, eps, n):
    z1, p1 = leapfrog(z, p, t, eps, n)
    return min(1.0, math.exp(-(hamiltonian(z1, p1, t) - hamiltonian(z, p, t))))


def test_momentum_sign_and_reversal_symmetry(rng):
    t = GaussianTarget(2)
    fwd, flipped, reverse = [], [], []
    for _ in range(1000):
        z, p = rng.normal(size=2), rng.normal(size=2)
        fwd.append(_accept_prob(t, z, p, 0.9, 3))
        flipped.append(_accept_prob(t, z, -p, 0.9, 3))
        z1, p1 = leapfrog(z, p, t, 0.9, 3)
        reverse.append(_accept_prob(t, z1, -p1, 0.9, 3))
    fwd, flipped, reverse = map(np.array, (fwd, flipped, reverse))
    se = fwd.std() / math.sqrt(fwd.size)
    assert abs(fwd.mean() - flipped.mean()) < 3 * math.sqrt(2) * se
    # exact reversal: dH(reverse) == -dH(forward)
    both = np.minimum(fwd, reverse)
    assert np.all(np.isclose(np.maximum(fwd, reverse), 1.0) | np.isclose(both, 1.0))


def test_posterior_mean_rates_examples():
    one = PosteriorSamples(np.array([[0.0, math.log(2)]]), np.zeros((1, 3)), 1.0, np.zeros(1))
    np.testing.assert_allclose(posterior_mean_rates(one), [1.0, 2.0], rtol=1e-15)
    two = PosteriorSamples(np.array([[0.0], [math.log(3)]]), np.zeros((2, 3)), 1.0, np.zeros(2))
    assert posterior_mean_rates(two)[0] == pytest.approx(2.0, rel=1e-15)
    const = PosteriorSamples(np.full((4, 2), 0.7), np.zeros((4, 3)), 1.0, np.zeros(4))
    np.testing.assert_allclose(posterior_mean_rates(const), math.exp(0.7), rtol=1e-15)


def test_sample_on_model_and_dump(tmp_path, rng):
    data = RequestMatrix(rng.poisson(3, size=(6, 5)))
    x = rng.normal(size=(6, 2))
    cfg = HmcConfig(num_samples=40, burn_in=20, seed=3)
    s1 = sample(data, x, default_priors(2), cfg)
    s2 = sample(data, x, default_priors(2), cfg)
    np.testing.assert_array_equal(s1.lambda_draws, s2.lambda_draws)
    assert s1.lambda_draws.shape == (40, 6) and s1.phi_draws.shape == (40, 4)
    assert 0 <= s1.accept_rate <= 1
    path = tmp_path / "draws.csv"
    write_draws_csv(s1, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ("draw," + ",".join(f"lambda_{i}" for i in range(1, 7)) + ","
                        + ",".join(f"phi_{q}" for q in range(4)) + ",accepted,H")
    assert len(lines) == 41


def test_initial_state_smoothed_log_mle():
    st = initial_state(RequestMatrix([[0, 0], [3, 1]]), 3)
    np.testing.assert_allclose(st.lam, np.log([0.25, 2.25]))
    np.testing.assert_array_equal(st.phi, np.zeros(5))
