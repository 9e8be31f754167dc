import math

import numpy as np
import pytest

from stochens.errors import ConfigError, DomainError
from stochens.masks import StochasticSpec
from stochens.net import MLPArch, ParamVector, PriorSpec, nll, random_params
from stochens.rng import derive_rng
from stochens.toydata import ToySpec, generate_toy
from stochens.vi import (
    EnsembleFamilySpec,
    enll,
    enumerate_stochastic_mixture,
    kl_deep_ensemble,
    kl_stochastic_ensemble,
    mc_kl_oracle,
    rf2_mc_bound,
    rf_exact_mc,
    rf_upper_bound,
    training_loss,
)

DIM3 = MLPArch((2, 1))       # 3 parameters
PAIR = MLPArch((1, 2))       # 2 output nodes, 2 parameters each
SMALL = MLPArch((2, 4, 4, 2))
NONE = StochasticSpec(kind="none")


def family(members, sigma2=0.25, lam=1.0, spec=NONE, members_b=None):
    return EnsembleFamilySpec(
        members=tuple(members),
        sigma2=sigma2,
        stochastic=spec,
        prior=PriorSpec(lam),
        members_b=tuple(members_b) if members_b is not None else None,
    )


class TestENLL:
    def test_single_plain_member_equals_nll(self):
        rng = derive_rng(0, "enll")
        member = random_params(SMALL, rng)
        data = generate_toy(ToySpec(variant="a", n_per_class=10, seed=1))
        ens = family([member])
        assert enll(ens, data) == nll(member, data)

    def test_identical_members_equal_one(self):
        rng = derive_rng(1, "enll")
        member = random_params(SMALL, rng)
        data = generate_toy(ToySpec(variant="b", n_per_class=8, seed=2))
        ens = family([member, member.copy()])
        assert math.isclose(enll(ens, data), nll(member, data), rel_tol=1e-12)

    def test_dropout_matches_mask_enumeration(self):
        from stochens.masks import MaskSet, StochasticKind

        rng = derive_rng(2, "enll")
        member = random_params(SMALL, rng, scale=0.8)
        data = generate_toy(ToySpec(variant="a", n_per_class=6, seed=3))
        spec = StochasticSpec(kind="dropout", drop_rates=0.5)
        ens = family([member], spec=spec)

        exact = 0.0
        for bits in range(2**8):
            pattern = np.array([(bits >> i) & 1 for i in range(8)], dtype=np.float64)
            masks = MaskSet(
                kind=StochasticKind.DROPOUT, node_masks=(pattern[:4], pattern[4:], None)
            )
            exact += nll(member, data, masks=masks) / 2**8

        passes = 3000
        values = np.array(
            [enll(ens, data, passes_per_member=1, rng=rng) for _ in range(passes)]
        )
        se = values.std(ddof=1) / math.sqrt(passes)
        assert abs(values.mean() - exact) < 3 * se

    def test_stochastic_without_rng_rejected(self):
        member = random_params(SMALL, derive_rng(3, "enll"))
        data = generate_toy(ToySpec(variant="a", n_per_class=5, seed=4))
        ens = family([member], spec=StochasticSpec(kind="dropout", drop_rates=0.1))
        with pytest.raises(ConfigError):
            enll(ens, data)


class TestRFUpperBound:
    def test_single_member_zero(self):
        assert rf_upper_bound([random_params(DIM3, derive_rng(4, "rf"))], 0.1) == 0.0

    def test_coincident_pair(self):
        member = random_params(DIM3, derive_rng(5, "rf"))
        assert math.isclose(rf_upper_bound([member, member.copy()], 0.3), 1.0, rel_tol=1e-12)

    def test_analytic_distance(self):
        sigma2 = 0.25
        a = ParamVector(np.zeros(3), DIM3)
        b = ParamVector(np.array([math.sqrt(8 * sigma2), 0.0, 0.0]), DIM3)
        assert math.isclose(rf_upper_bound([a, b], sigma2), math.exp(-1), rel_tol=1e-12)


class TestDeepEnsembleKL:
    def test_family_equals_prior(self):
        ens = family([ParamVector(np.zeros(3), DIM3)], sigma2=1.0, lam=1.0)
        assert kl_deep_ensemble(ens).total_upper_bound == 0.0

    def test_only_l2_survives(self):
        values = np.array([1.0, 1.0, 0.0])
        ens = family([ParamVector(values, DIM3)], sigma2=1.0, lam=1.0)
        breakdown = kl_deep_ensemble(ens)
        assert breakdown.constant_term == 0.0
        assert math.isclose(breakdown.total_upper_bound, 1.0, rel_tol=1e-12)

    def test_matches_mc_oracle_with_exact_overlap(self):
        rng = derive_rng(6, "kl")
        members = [random_params(DIM3, rng) for _ in range(2)]
        ens = family(members, sigma2=0.25, lam=1.0)
        breakdown = kl_deep_ensemble(ens)
        weights = np.full(2, 0.5)
        means = np.stack([m.values for m in members])
        oracle, se_oracle = mc_kl_oracle(
            weights, means, 0.25, ens.prior, 1_000_000, derive_rng(6, "oracle")
        )
        rf_exact, se_rf = rf_exact_mc(weights, means, 0.25, 1_000_000, derive_rng(6, "rfx"))
        closed = breakdown.total_upper_bound - breakdown.rf_bound + rf_exact
        assert abs(closed - oracle) < 3 * math.hypot(se_oracle, se_rf)
        assert breakdown.rf_bound >= rf_exact - 3 * se_rf

    def test_permutation_invariant(self):
        rng = derive_rng(7, "kl")
        members = [random_params(DIM3, rng) for _ in range(3)]
        a = kl_deep_ensemble(family(members))
        b = kl_deep_ensemble(family(members[::-1]))
        assert math.isclose(a.total_upper_bound, b.total_upper_bound, rel_tol=1e-12)

    def test_log_k_strictly_decreasing(self):
        rng = derive_rng(8, "kl")
        members = [random_params(DIM3, rng) for _ in range(4)]
        log_ks = [
            kl_deep_ensemble(family(members[: k + 1])).log_k_term for k in range(4)
        ]
        assert all(b < a for a, b in zip(log_ks, log_ks[1:]))

    def test_rejects_stochastic_kind(self):
        member = random_params(PAIR, derive_rng(9, "kl"))
        ens = family([member], spec=StochasticSpec(kind="np_exchange"), members_b=[member.copy()])
        with pytest.raises(ConfigError):
            kl_deep_ensemble(ens)


class TestStochasticKL:
    def exchange_family(self, seed, sigma2=0.25):
        rng = derive_rng(seed, "sto")
        a, b = random_params(PAIR, rng), random_params(PAIR, rng)
        return family(
            [a], sigma2=sigma2, spec=StochasticSpec(kind="np_exchange"), members_b=[b]
        )

    def test_exchange_entropy_term(self):
        breakdown = kl_stochastic_ensemble(self.exchange_family(10))
        assert math.isclose(
            breakdown.stochastic_entropy_term, -2 * math.log(2), rel_tol=1e-12
        )

    def test_vanishing_rate_recovers_deep_ensemble(self):
        rng = derive_rng(11, "sto")
        member = random_params(SMALL, rng)
        deep = kl_deep_ensemble(family([member], sigma2=0.04))
        for rate in (1e-4, 1e-6):
            spec = StochasticSpec(kind="dropout", drop_rates=rate)
            stoch = kl_stochastic_ensemble(family([member], sigma2=0.04, spec=spec))
            # 8 hidden nodes, each contributing O(rate log(1/rate))
            scale = 8 * rate * (1.0 - math.log(rate))
            assert abs(stoch.stochastic_entropy_term) < 2 * scale
            assert math.isclose(
                stoch.total_upper_bound, deep.total_upper_bound, abs_tol=20 * scale
            )

    def test_matches_mc_oracle_on_enumerated_mixture(self):
        ens = self.exchange_family(12)
        breakdown = kl_stochastic_ensemble(ens)
        weights, means = enumerate_stochastic_mixture(ens)
        assert len(weights) == 4 and math.isclose(weights.sum(), 1.0)
        oracle, se_oracle = mc_kl_oracle(
            weights, means, ens.sigma2, ens.prior, 1_000_000, derive_rng(12, "oracle")
        )
        rf_exact, se_rf = rf_exact_mc(
            weights, means, ens.sigma2, 1_000_000, derive_rng(12, "rfx")
        )
        closed = breakdown.total_upper_bound - breakdown.rf_bound + rf_exact
        assert abs(closed - oracle) < 3 * math.hypot(se_oracle, se_rf)
        assert breakdown.rf_bound >= rf_exact - 3 * se_rf

    def test_entropy_term_shape(self):
        # per-node Bernoulli entropy: 0 at the edges, lowest at 1/2, and
        # matching the analytic formula across the 8 hidden nodes
        def term(p):
            spec = StochasticSpec(kind="dropout", drop_rates=1.0 - p)
            ens = family([random_params(SMALL, derive_rng(13, "sto"))], spec=spec)
            return kl_stochastic_ensemble(ens).stochastic_entropy_term

        def analytic(p):
            if p in (0.0, 1.0):
                return 0.0
            return 8 * (p * math.log(p) + (1 - p) * math.log(1 - p))

        ps = np.linspace(0.0, 1.0, 21)
        values = np.array([term(p) for p in ps])
        expected = np.array([analytic(p) for p in ps])
        assert np.allclose(values, expected, atol=1e-12)
        assert values[0] == 0.0 and values[-1] == 0.0
        assert values.argmin() == 10


class TestRF2MCBound:
    def test_degenerate_single_realization(self):
        member = random_params(PAIR, derive_rng(14, "rf2"))
        spec = StochasticSpec(kind="dropout", drop_rates=0.0)
        ens = family([member], spec=spec)
        estimate, stderr = rf2_mc_bound(ens, derive_rng(14, "mc"), 10_000)
        assert estimate == 0.0 and stderr == 0.0

    def test_machine_precision_sigma_collapses(self):
        ens = TestStochasticKL().exchange_family(15, sigma2=1e-30)
        estimate, _ = rf2_mc_bound(ens, derive_rng(15, "mc"), 10_000)
        assert estimate < 1e-300

    def test_matches_exhaustive_enumeration(self):
        ens = TestStochasticKL().exchange_family(16)
        weights, means = enumerate_stochastic_mixture(ens)
        sq = ((means[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
        overlap = np.sqrt(np.outer(weights, weights)) * np.exp(-sq / (8 * ens.sigma2))
        np.fill_diagonal(overlap, 0.0)
        exact = overlap.sum()
        estimate, stderr = rf2_mc_bound(ens, derive_rng(16, "mc"), 200_000)
        assert abs(estimate - exact) < 3 * stderr


class TestMCKLOracle:
    def test_prior_itself(self):
        # q == p, so every sampled log-ratio is exactly zero
        estimate, stderr = mc_kl_oracle(
            [1.0], np.zeros((1, 3)), 1.0, PriorSpec(1.0), 200_000, derive_rng(17, "or")
        )
        assert abs(estimate) <= 3 * stderr
        assert estimate == 0.0

    def test_shifted_gaussian_analytic(self):
        mu = 0.7
        estimate, stderr = mc_kl_oracle(
            [1.0], np.array([[mu]]), 1.0, PriorSpec(1.0), 500_000, derive_rng(18, "or")
        )
        assert abs(estimate - 0.5 * mu**2) < 3 * stderr

    def test_far_separated_symmetric_mixture(self):
        a, sigma2, lam = 6.0, 0.01, 1.0
        dim = 2
        means = np.array([[a, 0.0], [-a, 0.0]])
        estimate, stderr = mc_kl_oracle(
            [0.5, 0.5], means, sigma2, PriorSpec(lam), 500_000, derive_rng(19, "or")
        )
        constant = 0.5 * dim * (lam * sigma2 - math.log(sigma2) - 1 - math.log(lam))
        expected = constant + 0.5 * lam * a**2 - math.log(2)
        assert abs(estimate - expected) < 3 * stderr

    def test_weights_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            mc_kl_oracle(
                [0.5, 0.4], np.zeros((2, 2)), 0.1, PriorSpec(1.0), 100, derive_rng(20, "or")
            )

    def test_dimension_cap(self):
        with pytest.raises(ConfigError):
            mc_kl_oracle(
                [1.0], np.zeros((1, 17)), 0.1, PriorSpec(1.0), 100, derive_rng(21, "or")
            )


class TestTrainingLoss:
    def data(self, seed=22):
        return generate_toy(ToySpec(variant="a", n_per_class=10, seed=seed))

    def test_zero_lambda_is_masked_mean_nll(self):
        rng = derive_rng(23, "tl")
        member = random_params(SMALL, rng)
        data = self.data()
        tiny = PriorSpec(1e-300)
        loss = training_loss(member, data, NONE, tiny)
        assert math.isclose(loss, nll(member, data, reduction="mean"), rel_tol=1e-10)

    def test_zero_params_two_classes(self):
        member = ParamVector(np.zeros(SMALL.n_params), SMALL)
        loss = training_loss(member, self.data(), NONE, PriorSpec(1.0))
        assert math.isclose(loss, math.log(2), rel_tol=1e-12)

    def test_exchange_with_equal_sets(self):
        rng = derive_rng(24, "tl")
        member = random_params(SMALL, rng)
        data = self.data()
        prior = PriorSpec(2.0)
        spec = StochasticSpec(kind="np_exchange")
        loss = training_loss(
            (member, member.copy()), data, spec, prior, rng=derive_rng(24, "mask")
        )
        # equal sets: the data term is deterministic and the weighted L2
        # (both sets at 1/2) collapses to the plain squared norm
        plain = nll(member, data, reduction="mean") + 0.5 * prior.lam * float(
            member.values @ member.values
        ) / data.n
        assert math.isclose(loss, plain, rel_tol=1e-12)


class TestBreakdownInvariants:
    def test_total_is_sum_of_terms(self):
        rng = derive_rng(25, "inv")
        members = [random_params(DIM3, rng) for _ in range(3)]
        b = kl_deep_ensemble(family(members))
        total = (
            b.constant_term
            + b.l2_term
            + b.log_k_term
            + b.stochastic_entropy_term
            + b.rf_bound
        )
        assert math.isclose(b.total_upper_bound, total, rel_tol=1e-12)

    def test_serializes_all_six_fields(self):
        member = random_params(DIM3, derive_rng(26, "inv"))
        payload = kl_deep_ensemble(family([member])).to_dict()
        assert set(payload) == {
            "constant_term",
            "l2_term",
            "log_k_term",
            "stochastic_entropy_term",
            "rf_bound",
            "total_upper_bound",
        }

    def test_sigma2_must_be_positive(self):
        member = random_params(DIM3, derive_rng(27, "inv"))
        with pytest.raises(ConfigError):
            family([member], sigma2=0.0)

    def test_oracle_degenerate_sigma_rejected(self):
        with pytest.raises(DomainError):
            mc_kl_oracle(
                [1.0], np.zeros((1, 2)), -1.0, PriorSpec(1.0), 100, derive_rng(28, "or")
            )
