import math

import numpy as np
import pytest

from stochens.errors import ConfigError, SamplerError, ShapeError
from stochens.hmc import (
    HMCConfig,
    PosteriorSamples,
    leapfrog,
    load_posterior,
    nuts_chain,
    rhat,
    run_hmc,
    save_posterior,
)
from stochens.net import MLPArch, PriorSpec
from stochens.rng import derive_rng
from stochens.toydata import ToySpec, generate_toy


def gaussian_target(cov_inv):
    cov_inv = np.asarray(cov_inv, dtype=np.float64)

    def potential(theta):
        return 0.5 * float(theta @ cov_inv @ theta)

    def grad(theta):
        return cov_inv @ theta

    return potential, grad


class TestLeapfrog:
    def test_zero_momentum_zero_gradient(self):
        theta = np.array([1.0, -2.0])
        new_theta, new_r = leapfrog(theta, np.zeros(2), 0.3, lambda t: np.zeros(2))
        assert np.array_equal(new_theta, theta)
        assert np.array_equal(new_r, np.zeros(2))

    def test_hand_computed_quadratic_step(self):
        theta, r = np.array([1.0]), np.array([0.0])
        new_theta, new_r = leapfrog(theta, r, 0.1, lambda t: t)
        assert math.isclose(new_theta[0], 0.995, rel_tol=1e-15)
        assert math.isclose(new_r[0], -0.099750, rel_tol=1e-12)

    def test_reversibility(self):
        rng = derive_rng(0, "lf")
        _, grad = gaussian_target(np.array([[2.0, 0.5], [0.5, 1.0]]))
        for _ in range(20):
            theta = rng.standard_normal(2)
            r = rng.standard_normal(2)
            t1, r1 = leapfrog(theta, r, 0.05, grad)
            t2, r2 = leapfrog(t1, -r1, 0.05, grad)
            assert np.abs(t2 - theta).max() < 1e-12
            assert np.abs(-r2 - r).max() < 1e-12

    def test_energy_error_scales_quadratically(self):
        # |dH| over a 50-step trajectory shrinks ~4x when the step halves
        from stochens.hmc import _posterior_closures

        data = generate_toy(ToySpec(variant="a", n_per_class=25, seed=1))
        potential, grad, _ = _posterior_closures(MLPArch(), data, PriorSpec(1.0))
        rng = derive_rng(1, "lf")
        ratios = []
        for _ in range(20):
            theta0 = 0.1 * rng.standard_normal(162)
            r0 = rng.standard_normal(162)
            errors = {}
            for eps in (0.004, 0.002):
                theta, r = theta0, r0
                h0 = potential(theta) + 0.5 * float(r @ r)
                for _ in range(50):
                    theta, r = leapfrog(theta, r, eps, grad)
                errors[eps] = abs(potential(theta) + 0.5 * float(r @ r) - h0)
            ratios.append(errors[0.004] / errors[0.002])
        assert 3.0 < np.median(ratios) < 5.0


class TestNutsOnGaussians:
    def test_standard_normal_moments(self):
        potential, grad = gaussian_target(np.eye(2))
        config = HMCConfig(n_chains=1, n_warmup=500, n_samples=2000, seed=11)
        samples, stats = nuts_chain(potential, grad, 2, config, chain_id=0)
        assert samples.shape == (2000, 2)
        assert np.abs(samples.mean(axis=0)).max() < 0.05
        assert np.abs(samples.var(axis=0) - 1.0).max() < 0.1
        assert stats["divergences"] == 0

    def test_correlated_gaussian_correlation(self):
        rho = 0.9
        cov = np.array([[1.0, rho], [rho, 1.0]])
        potential, grad = gaussian_target(np.linalg.inv(cov))
        config = HMCConfig(n_chains=1, n_warmup=500, n_samples=2000, seed=12)
        samples, _ = nuts_chain(potential, grad, 2, config, chain_id=0)
        observed = np.corrcoef(samples.T)[0, 1]
        assert abs(observed - rho) < 0.05

    def test_determinism(self):
        potential, grad = gaussian_target(np.eye(3))
        config = HMCConfig(n_chains=1, n_warmup=100, n_samples=200, seed=13)
        first, _ = nuts_chain(potential, grad, 3, config, chain_id=0)
        second, _ = nuts_chain(potential, grad, 3, config, chain_id=0)
        assert np.array_equal(first, second)

    def test_all_divergent_warmup_flagged(self):
        def potential(theta):
            return math.inf if np.abs(theta).max() > 0 else 0.0

        def grad(theta):
            return np.zeros_like(theta)

        config = HMCConfig(n_chains=1, n_warmup=20, n_samples=10, seed=14)
        with pytest.raises(SamplerError):
            nuts_chain(potential, grad, 2, config, chain_id=0)


class TestRunHMC:
    def small_config(self, **kw):
        defaults = dict(n_chains=2, n_warmup=60, n_samples=40, seed=21)
        defaults.update(kw)
        return HMCConfig(**defaults)

    def data(self):
        return generate_toy(ToySpec(variant="a", n_per_class=15, seed=2))

    def test_stacks_all_chains(self):
        posterior = run_hmc(self.data(), PriorSpec(1.0), self.small_config())
        assert posterior.samples.shape == (80, 162)
        assert len(posterior.provenance["chains"]) == 2

    def test_single_chain_equals_nuts_chain(self):
        from stochens.hmc import _posterior_closures

        config = self.small_config(n_chains=1)
        data = self.data()
        posterior = run_hmc(data, PriorSpec(1.0), config)
        _, _, target = _posterior_closures(MLPArch(), data, PriorSpec(1.0))
        samples, _ = nuts_chain(None, None, 162, config, 0, potential_and_grad=target)
        assert np.array_equal(posterior.samples, samples)

    def test_repeat_run_bit_identical(self):
        config = self.small_config()
        data = self.data()
        first = run_hmc(data, PriorSpec(1.0), config)
        second = run_hmc(data, PriorSpec(1.0), config)
        assert np.array_equal(first.samples, second.samples)

    def test_store_round_trip(self, tmp_path):
        posterior = run_hmc(self.data(), PriorSpec(1.0), self.small_config())
        save_posterior(tmp_path / "post", posterior)
        loaded = load_posterior(tmp_path / "post")
        assert np.array_equal(loaded.samples, posterior.samples)
        assert loaded.arch == posterior.arch
        assert loaded.provenance["config"] == posterior.provenance["config"]


class TestRhat:
    def test_identical_chains_near_one(self):
        rng = derive_rng(3, "rhat")
        chain = rng.standard_normal((500, 4))
        values = rhat([chain, chain.copy()])
        assert np.abs(values - 1.0).max() < 0.01

    def test_detects_non_mixing(self):
        rng = derive_rng(4, "rhat")
        a = rng.standard_normal((200, 1))
        b = rng.standard_normal((200, 1)) + 10.0
        assert rhat([a, b])[0] > 1.1

    def test_iid_chains_tight(self):
        rng = derive_rng(5, "rhat")
        chains = rng.standard_normal((4, 1000, 3))
        assert rhat(chains).max() < 1.01

    def test_zero_variance_gives_nan(self):
        flat = np.ones((100, 1))
        with pytest.warns(UserWarning):
            values = rhat([flat, flat.copy()])
        assert np.isnan(values[0])

    def test_minimum_inputs(self):
        with pytest.raises(ConfigError):
            rhat(np.ones((1, 10, 2)))
        with pytest.raises(ConfigError):
            rhat(np.ones((2, 3, 2)))


class TestPosteriorSamples:
    def test_rejects_non_finite(self):
        with pytest.raises(ShapeError):
            PosteriorSamples(np.array([[np.nan, 1.0]]))

    def test_rejects_arch_mismatch(self):
        with pytest.raises(ShapeError):
            PosteriorSamples(np.zeros((3, 4)), arch=MLPArch())

    def test_predictive_permutation_invariant_in_chain_order(self):
        from stochens.training import predict

        posterior = run_hmc(
            generate_toy(ToySpec(variant="a", n_per_class=10, seed=6)),
            PriorSpec(1.0),
            HMCConfig(n_chains=2, n_warmup=40, n_samples=20, seed=31),
        )
        points = derive_rng(7, "pp").uniform(-1, 1, (17, 2))
        forwardp = predict(posterior, points).probs
        flipped = PosteriorSamples(
            np.concatenate([posterior.samples[20:], posterior.samples[:20]]),
            arch=posterior.arch,
        )
        backward = predict(flipped, points).probs
        assert np.allclose(forwardp, backward, atol=1e-12)
