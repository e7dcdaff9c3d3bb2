import math

import numpy as np
import pytest

from common.calculations import alpha_utility
from common.model import ChannelGains, FadingModel, UtilityConfig
from common.rate import (RateMatrix, as_activation, conservative_rate, kkt_gamma, rate_matrix, system_utility,
                         theta_matrix)
from common.setfn import Association, SetFunction
from tests.helpers import random_gains, random_utility

ALPHAS = [0.25, 0.5, 1.0, 2.0, 3.0]


class TestConservativeRate:
    def test_single_link_in_nats(self):
        gains = ChannelGains([[math.e - 1]])
        assert conservative_rate(gains, [1.0], 0, 0, mc_samples=0) == pytest.approx(1.0, abs=1e-12)

    def test_half_active_interferer(self):
        gains = ChannelGains([[3.0, 2.0]])
        assert conservative_rate(gains, [1.0, 0.5], 0, 0, mc_samples=0) == pytest.approx(math.log(2.5), abs=1e-12)
        assert math.log(2.5) == pytest.approx(0.91629, abs=1e-5)

    def test_scales_with_own_fraction(self):
        gains = ChannelGains([[3.0, 2.0]])
        full = conservative_rate(gains, [1.0, 0.5], 0, 0, mc_samples=0)
        assert conservative_rate(gains, [0.25, 0.5], 0, 0, mc_samples=0) == pytest.approx(0.25 * full)

    def test_rayleigh_matches_independent_monte_carlo(self):
        gains = ChannelGains([[3.0, 2.0]], FadingModel.RAYLEIGH_UNIT)
        samples = 200_000
        rate = conservative_rate(gains, [1.0, 0.5], 0, 0, mc_samples=samples, seed=123)

        rng = np.random.default_rng(987654)
        own = 3.0 * rng.exponential(size=samples)
        other = 2.0 * rng.exponential(size=samples)
        oracle = np.log1p(own / (1 + 0.5 * other))
        standard_error = oracle.std() / math.sqrt(samples)
        assert abs(rate - oracle.mean()) <= 3 * math.sqrt(2) * standard_error

    def test_zero_samples_needs_no_fading(self):
        gains = ChannelGains([[1.0]], FadingModel.RAYLEIGH_UNIT)
        with pytest.raises(ValueError, match="mc_samples"):
            conservative_rate(gains, [1.0], 0, 0, mc_samples=0)

    @pytest.mark.parametrize("rho", [[1.5, 0.5], [-0.1, 1.0], [1.0]])
    def test_activation_checked(self, rho):
        with pytest.raises(ValueError, match="activation"):
            as_activation(rho, 2)


class TestRateMatrix:
    def test_all_off(self):
        rates = rate_matrix(random_gains(0, 4, 3), np.zeros(3), mc_samples=0)
        assert np.all(rates.R == 0)

    def test_entries_match_single_rates(self):
        gains = ChannelGains([[2.0, 5.0]])
        rho = np.array([0.7, 0.4])
        rates = rate_matrix(gains, rho, mc_samples=0)
        for b in range(2):
            assert rates.R[0, b] == pytest.approx(conservative_rate(gains, rho, 0, b, mc_samples=0), rel=1e-14)
        assert rates.mc_samples == 0

    def test_zero_gain_gives_zero_rate(self):
        gains = ChannelGains([[2.0, 0.0], [1.0, 1.0]])
        rates = rate_matrix(gains, np.ones(2), mc_samples=0)
        assert rates.R[0, 1] == 0
        assert np.all(rates.R[1] > 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_raising_an_interferer_never_helps(self, seed):
        gains = random_gains(seed, 5, 3)
        rng = np.random.default_rng(seed)
        rho = rng.uniform(0.1, 0.9, size=3)
        before = rate_matrix(gains, rho, mc_samples=0).R
        raised = rho.copy()
        raised[1] += 0.1
        after = rate_matrix(gains, raised, mc_samples=0).R
        assert np.all(after[:, [0, 2]] <= before[:, [0, 2]] + 1e-15)

    def test_common_random_numbers(self):
        gains = random_gains(3, 3, 2, FadingModel.RAYLEIGH_UNIT)
        first = rate_matrix(gains, [1.0, 0.5], mc_samples=500, seed=4)
        second = rate_matrix(gains, [1.0, 0.5], mc_samples=500, seed=4)
        assert np.array_equal(first.R, second.R)
        assert first.mc_samples == 500


class TestThetaMatrix:
    @pytest.mark.parametrize("alpha, expected", [(2.0, math.sqrt(0.5)), (0.5, 1.0), (1.0, 0.5)])
    def test_plug_in_values(self, alpha, expected):
        theta = theta_matrix(RateMatrix(np.ones((2, 1)), 0), UtilityConfig(alpha, [0.5, 0.5]))
        assert theta.theta[0, 0] == pytest.approx(expected)
        assert theta.alpha == alpha

    def test_theta_is_the_weight_at_alpha_one(self):
        theta = theta_matrix(RateMatrix(np.array([[3.0], [0.2]]), 0), UtilityConfig(1.0, [0.25, 0.75]))
        assert theta.theta[:, 0] == pytest.approx([0.25, 0.75])

    def test_zero_rate_is_infeasible(self):
        theta = theta_matrix(RateMatrix(np.array([[1.0, 0.0]]), 0), UtilityConfig(2.0, [1.0]))
        assert list(theta.feasible[0]) == [True, False]
        assert np.isnan(theta.theta[0, 1])


class TestKktGamma:
    def test_single_user_gets_everything(self):
        rates = RateMatrix(np.array([[2.0, 1.0]]), 0)
        gamma = kkt_gamma(Association.from_tps([0], 2), rates, UtilityConfig(2.0, [1.0]))
        assert gamma.gamma[0, 0] == 1.0
        assert gamma.gamma[0, 1] == 0.0

    def test_weight_proportional_at_alpha_one(self):
        rates = RateMatrix(np.array([[1.0], [5.0]]), 0)
        gamma = kkt_gamma(Association.from_tps([0, 0], 1), rates, UtilityConfig(1.0, [0.25, 0.75]))
        assert gamma.gamma[:, 0] == pytest.approx([0.25, 0.75])

    def test_alpha_two_split_is_the_utility_maximizer(self):
        rates = RateMatrix(np.array([[1.0], [4.0]]), 0)
        util = UtilityConfig(2.0, [0.5, 0.5])
        gamma = kkt_gamma(Association.from_tps([0, 0], 1), rates, util).gamma[:, 0]
        share = np.array([math.sqrt(0.5), math.sqrt(0.5 / 4)])
        assert gamma == pytest.approx(share / share.sum())

        grid = np.linspace(1e-4, 1 - 1e-4, 20001)
        values = -0.5 / grid - 0.5 / (4 * (1 - grid))
        assert gamma[0] == pytest.approx(grid[np.argmax(values)], abs=1e-4)

    def test_idle_tp_has_empty_column(self):
        rates = RateMatrix(np.ones((2, 3)), 0)
        gamma = kkt_gamma(Association.from_tps([0, 2], 3), rates, UtilityConfig.uniform(0.5, 2))
        assert np.all(gamma.gamma[:, 1] == 0)

    def test_zero_rate_link_rejected(self):
        rates = RateMatrix(np.array([[0.0, 1.0]]), 0)
        with pytest.raises(ValueError, match="zero-rate"):
            kkt_gamma(Association.from_tps([0], 2), rates, UtilityConfig(1.0, [1.0]))

    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_beats_random_time_splits(self, alpha):
        gains = random_gains(21, 6, 2)
        rates = rate_matrix(gains, np.ones(2), mc_samples=0)
        util = random_utility(21, alpha, 6)
        association = Association.from_tps([0, 0, 0, 1, 1, 1], 2)
        best = system_utility(association, kkt_gamma(association, rates, util), rates, util)

        rng = np.random.default_rng(5)
        users = np.arange(6)
        for _ in range(1000):
            gamma = np.zeros((6, 2))
            for b in range(2):
                members = association.users_on(b)
                gamma[members, b] = rng.dirichlet(np.ones(len(members)))
            value = sum(util.weights[k] * alpha_utility(gamma[k, association.tp_of[k]] * rates.R[k, association.tp_of[k]],
                                                        alpha) for k in users)
            assert value <= best + 1e-12 * max(1.0, abs(best))


class TestSystemUtility:
    def test_log_utility(self):
        rates = RateMatrix(np.array([[math.e]]), 0)
        association = Association.from_tps([0], 1)
        util = UtilityConfig(1.0, [1.0])
        assert system_utility(association, kkt_gamma(association, rates, util), rates, util) == pytest.approx(1.0)

    def test_alpha_two(self):
        rates = RateMatrix(np.array([[2.0]]), 0)
        association = Association.from_tps([0], 1)
        util = UtilityConfig(2.0, [1.0])
        assert system_utility(association, kkt_gamma(association, rates, util), rates, util) == pytest.approx(-0.5)

    @pytest.mark.parametrize("alpha", ALPHAS)
    @pytest.mark.parametrize("seed", range(4))
    def test_equals_signed_set_function(self, alpha, seed):
        gains = random_gains(seed, 7, 3)
        rates = rate_matrix(gains, np.array([1.0, 0.6, 0.3]), mc_samples=0)
        util = random_utility(seed, alpha, 7)
        set_fn = SetFunction(theta_matrix(rates, util), rates, util)
        association = Association.from_tps(np.random.default_rng(seed).integers(0, 3, size=7).tolist(), 3)

        utility = system_utility(association, kkt_gamma(association, rates, util), rates, util)
        g = set_fn.value(association)
        expected = -g if alpha > 1 else g
        assert utility == pytest.approx(expected, rel=1e-9, abs=1e-12)
