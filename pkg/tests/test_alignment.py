import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from collate.alignment import (
    AlignmentConfig,
    HalfGaussianFit,
    MonotoneMapping,
    alignment_loss,
    alignment_loss_grad,
    discrete_alignment_objective,
    fit_half_gaussian,
    half_gaussian_density,
    kl_histogram,
    train_mapping,
)
from collate.errors import DegenerateScores


class TestFit:
    def test_mirror_set_algebra(self):
        fit = fit_half_gaussian(np.array([0.3, 0.4]))
        assert fit.sigma == pytest.approx(math.sqrt((0.09 + 0.16) / 2.0))

    def test_monte_carlo_recovery_within_one_percent(self):
        rng = np.random.default_rng(5)
        samples = np.abs(rng.normal(0.0, 0.3, 100_000))
        fit = fit_half_gaussian(samples)
        assert abs(fit.sigma - 0.3) / 0.3 < 0.01

    def test_all_zero_scores_rejected(self):
        with pytest.raises(DegenerateScores):
            fit_half_gaussian(np.zeros(10))

    def test_derived_moments_consistent(self):
        fit = HalfGaussianFit(0.37)
        assert fit.mu_hat == pytest.approx(0.37 * math.sqrt(2 / math.pi), abs=1e-12)
        assert fit.sigma_hat_sq == pytest.approx(0.37**2 * (1 - 2 / math.pi), abs=1e-12)


class TestDensity:
    def test_zero_below_origin(self):
        fit = HalfGaussianFit(0.5)
        assert half_gaussian_density(fit, -0.1) == 0.0

    def test_peak_value_at_origin(self):
        fit = HalfGaussianFit(1.0)
        assert half_gaussian_density(fit, 0.0) == pytest.approx(2.0 / math.sqrt(2 * math.pi))

    @pytest.mark.parametrize("sigma", [0.2, 0.7, 1.0, 2.5])
    def test_integrates_to_one(self, sigma):
        fit = HalfGaussianFit(sigma)
        total, _err = quad(lambda x: half_gaussian_density(fit, x), 0.0, np.inf)
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_printed_exponent_variant_differs(self):
        fit = HalfGaussianFit(0.5)
        assert half_gaussian_density(fit, 0.4, printed_exponent=True) != pytest.approx(
            half_gaussian_density(fit, 0.4)
        )


class TestAlignmentLoss:
    def test_reduces_to_log_density_without_penalties(self):
        fit = HalfGaussianFit(0.8)
        cfg = AlignmentConfig(lambda_hat_1=0.0, lambda_hat_2=0.0)
        mapped = np.array([0.2, 0.4, 0.6])
        expected = -np.mean(np.log(half_gaussian_density(fit, mapped)))
        assert alignment_loss(mapped, fit, cfg) == pytest.approx(expected)

    def test_constant_batch_variance_term(self):
        fit = HalfGaussianFit(1.0)
        cfg = AlignmentConfig(lambda_hat_1=0.0, lambda_hat_2=3.0)
        mapped = np.full(6, 0.5)
        base = alignment_loss(mapped, fit, AlignmentConfig(0.0, 0.0))
        full = alignment_loss(mapped, fit, cfg)
        assert full - base == pytest.approx(3.0 * fit.sigma_hat_sq**2)

    def test_worked_example(self):
        # sigma=1, mapped=[0.5, 0.5], only the mean penalty active
        fit = HalfGaussianFit(1.0)
        cfg = AlignmentConfig(lambda_hat_1=1.0, lambda_hat_2=0.0)
        dens = 2.0 / math.sqrt(2 * math.pi) * math.exp(-0.125)
        expected = -math.log(dens) + (0.5 - fit.mu_hat) ** 2
        got = alignment_loss(np.array([0.5, 0.5]), fit, cfg)
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.4395, abs=1e-3)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        fit = HalfGaussianFit(0.6)
        cfg = AlignmentConfig(0.7, 1.3)
        mapped = rng.uniform(0.05, 0.9, 12)
        _, grad = alignment_loss_grad(mapped, fit, cfg)
        h = 1e-6
        for i in (0, 5, 11):
            e = np.zeros_like(mapped)
            e[i] = h
            fd = (
                alignment_loss(mapped + e, fit, cfg)
                - alignment_loss(mapped - e, fit, cfg)
            ) / (2 * h)
            assert abs(fd - grad[i]) / abs(fd) < 1e-6


class TestDiscreteObjective:
    def test_single_bin_equals_log_total_mass(self):
        fit = HalfGaussianFit(1.0)
        cfg = AlignmentConfig(0.0, 0.0)
        got = discrete_alignment_objective(np.array([0.2, 0.8]), fit, 1, cfg)
        assert got == pytest.approx(-math.log(math.erf(1.0 / math.sqrt(2.0))), abs=1e-12)
        assert got == pytest.approx(0.38174, abs=1e-4)

    def test_empty_bins_contribute_nothing(self):
        fit = HalfGaussianFit(0.5)
        cfg = AlignmentConfig(0.0, 0.0)
        # both points in one bin of four; moving N up leaves empties silent
        v = discrete_alignment_objective(np.array([0.1, 0.12]), fit, 4, cfg)
        assert np.isfinite(v)

    def test_bin_masses_from_quadrature(self):
        fit = HalfGaussianFit(0.45)
        lo, hi = 0.3, 0.4
        mass, _ = quad(lambda x: half_gaussian_density(fit, x), lo, hi)
        from collate.alignment import bin_mass

        assert bin_mass(fit, lo, hi) == pytest.approx(mass, abs=1e-9)


class TestMonotoneMapping:
    def test_strictly_monotone_on_many_pairs(self):
        rng = np.random.default_rng(3)
        mapping = MonotoneMapping(hidden=8, seed=1)
        a = rng.uniform(-4, 4, 10_000)
        b = a + rng.uniform(1e-6, 2.0, 10_000)
        ma, mb = mapping(a), mapping(b)
        assert (ma <= mb).all()

    def test_output_in_open_unit_interval(self):
        mapping = MonotoneMapping(hidden=6, seed=2)
        out = mapping(np.linspace(-50, 50, 101))
        assert out.min() > 0.0 and out.max() < 1.0

    def test_roundtrip_dict(self):
        mapping = MonotoneMapping(hidden=5, seed=4)
        clone = MonotoneMapping.from_dict(mapping.to_dict())
        x = np.linspace(-2, 2, 17)
        np.testing.assert_array_equal(mapping(x), clone(x))


class TestTrainMapping:
    def test_moments_match_when_penalties_dominate(self):
        # Stationarity of the loss puts the trained mean at
        # mu_hat * 2 lam sigma^2 / (1 + 2 lam sigma^2): the log-density term
        # pulls every mapped score toward the mode at zero, so the target
        # moments are only reachable when lam sigma^2 is large.
        rng = np.random.default_rng(11)
        scaled = rng.uniform(0.0, 1.0, 400)
        fit = HalfGaussianFit(0.3)
        cfg = AlignmentConfig(1000.0, 1000.0, learning_rate=0.02, epochs=3000, seed=0)
        mapping = train_mapping(scaled, fit, cfg)
        mapped = mapping(scaled)
        assert abs(mapped.mean() - fit.mu_hat) / fit.mu_hat < 0.10
        assert abs(mapped.std(ddof=1) - math.sqrt(fit.sigma_hat_sq)) / math.sqrt(
            fit.sigma_hat_sq
        ) < 0.10

    def test_density_term_pulls_mean_below_target_at_unit_penalty(self):
        # At lam = 1 the equilibrium mean is mu_hat * 2 sigma^2 / (1 + 2 sigma^2);
        # training lands there, far below the target for small sigma.
        rng = np.random.default_rng(11)
        scaled = rng.uniform(0.0, 1.0, 400)
        fit = HalfGaussianFit(0.3)
        cfg = AlignmentConfig(1.0, 1.0, learning_rate=0.05, epochs=1500, seed=0)
        mapped = train_mapping(scaled, fit, cfg)(scaled)
        equilibrium = fit.mu_hat * (2 * fit.sigma**2) / (1 + 2 * fit.sigma**2)
        assert mapped.mean() == pytest.approx(equilibrium, rel=0.15)

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(12)
        scaled = rng.uniform(0.0, 1.0, 50)
        fit = HalfGaussianFit(0.4)
        cfg = AlignmentConfig(1.0, 1.0, epochs=50, seed=9)
        m1 = train_mapping(scaled, fit, cfg)
        m2 = train_mapping(scaled, fit, cfg)
        for k, v in m1.params().items():
            np.testing.assert_array_equal(v, m2.params()[k])

    def test_kl_drops_against_target(self):
        rng = np.random.default_rng(13)
        scaled = rng.uniform(0.2, 0.9, 600)
        fit = HalfGaussianFit(0.25)
        cfg = AlignmentConfig(1.0, 1.0, learning_rate=0.05, epochs=600, seed=0)
        mapping = train_mapping(scaled, fit, cfg)
        assert kl_histogram(mapping(scaled), fit, 40) < kl_histogram(scaled, fit, 40)


class TestKlHistogram:
    def test_identical_distributions_near_zero(self):
        rng = np.random.default_rng(8)
        a = rng.uniform(0, 1, 500)
        assert kl_histogram(a, a.copy(), 20) == pytest.approx(0.0, abs=1e-9)

    def test_two_bin_closed_form(self):
        a = np.full(100, 0.25)
        b = np.concatenate([np.full(50, 0.25), np.full(50, 0.75)])
        assert kl_histogram(a, b, 2) == pytest.approx(math.log(2.0), abs=1e-6)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0, 1, 100)
        b = rng.uniform(0, 1, 100)
        assert kl_histogram(a, b, 10) >= 0.0
