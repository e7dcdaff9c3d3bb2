import csv
import math

import numpy as np
import pytest

from common.constants import RHO_MIN
from common.convex import Monomial, posynomial_value
from common.model import ChannelGains, FadingModel, UtilityConfig
from common.rate import conservative_rate, interference, kkt_gamma, rate_matrix, system_utility
from common.setfn import Association
from controller.afopt import (AfConfig, AfProblem, AfRegime, PriceSchedule, ServedTuple, af_step_alpha_lt1, condense,
                              export_history_csv, export_price_history_csv, fractional_served_tuples,
                              interference_free_terms, mmse_update, mse, optimize_af, optimize_af_distributed,
                              price_step_size, served_tuples)
from tests.helpers import grid_search_rho, random_gains, random_utility

ALPHAS = [0.5, 1.0, 2.0]


def _problem(gains, tps, alpha, mc_samples=0):
    association = Association.from_tps(tps, gains.num_tps)
    return AfProblem(gains, UtilityConfig.uniform(alpha, len(tps)), served_tuples(association), mc_samples)


class TestMmse:
    def test_single_link(self):
        problem = _problem(ChannelGains([[3.0]]), [0], 2.0)
        state = mmse_update(problem, np.array([1.0]))
        assert state.filters[0, 0] == pytest.approx(math.sqrt(3) / 4)
        assert state.scales[0, 0] == pytest.approx(4.0)
        assert mse(state.filters[0, 0], 3.0, 0.0) == pytest.approx(1 / 4)

    def test_half_active_interferer(self):
        gains = ChannelGains([[3.0, 2.0], [1.0, 1.0]])
        problem = AfProblem(gains, UtilityConfig.uniform(2.0, 2), [ServedTuple(0, 0), ServedTuple(1, 1)], 0)
        state = mmse_update(problem, np.array([1.0, 0.5]))
        assert state.filters[0, 0] == pytest.approx(math.sqrt(3) / 5)
        assert state.scales[0, 0] == pytest.approx(2.5)
        assert mse(state.filters[0, 0], 3.0, 1.0) == pytest.approx(1 / 2.5)

    def test_bound_is_tight_at_the_expansion_point(self):
        gains = random_gains(5, 4, 3, FadingModel.RAYLEIGH_UNIT)
        problem = AfProblem(gains, random_utility(5, 2.0, 4),
                            served_tuples(Association.from_tps([0, 1, 2, 0], 3)), mc_samples=300, seed=2)
        rho = np.array([0.9, 0.4, 0.7])
        state = mmse_update(problem, rho)
        assert state.rate_bound(rho) == pytest.approx(problem.rates(rho), rel=1e-10)

        rng = np.random.default_rng(0)
        for _ in range(20):
            other = rng.uniform(0.05, 1.0, size=3)
            assert np.all(state.rate_bound(other) <= problem.rates(other) + 1e-12)

    def test_rate_identity_holds_per_sample(self):
        gains = random_gains(11, 3, 2, FadingModel.RAYLEIGH_UNIT)
        association = Association.from_tps([0, 1, 0], 2)
        problem = AfProblem(gains, UtilityConfig.uniform(2.0, 3), served_tuples(association), mc_samples=100_000)
        rho = np.array([0.8, 0.6])
        state = mmse_update(problem, rho)
        for i, (b, beta) in enumerate(zip(problem.tps, problem.link_samples)):
            own, noise = beta[:, b], interference(beta, rho)[:, b]
            s, e = state.scales[i], mse(state.filters[i], own, noise)
            gap = 1 - s * e + np.log(s) - np.log1p(own / (1 + noise))
            assert np.max(np.abs(gap)) <= 1e-12

    def test_sample_mean_matches_the_conservative_rate(self):
        gains = random_gains(12, 2, 2, FadingModel.RAYLEIGH_UNIT)
        association = Association.from_tps([0, 1], 2)
        problem = AfProblem(gains, UtilityConfig.uniform(1.0, 2), served_tuples(association), mc_samples=100_000,
                            seed=3)
        rho = np.array([1.0, 0.7])
        state = mmse_update(problem, rho)
        for i, (k, b) in enumerate(association.tuples()):
            values = rho[b] * np.log(state.scales[i])
            error = np.std(values) / math.sqrt(len(values))
            reference = conservative_rate(gains, rho, k, b, mc_samples=100_000, seed=4)
            # two independent estimates: the difference has standard error sqrt(2) * error
            assert abs(np.mean(values) - reference) <= 3 * math.sqrt(2) * error


class TestCondense:
    def test_exact_at_the_point_and_below_elsewhere(self):
        posynomial = [Monomial(1.0, {"x": 1.0}), Monomial(2.0, {"y": 1.0}), Monomial(0.5, {"x": -1.0, "y": 2.0})]
        point = {"x": 1.0, "y": 2.0}
        monomial = condense(posynomial, point)
        assert monomial.value(point) == pytest.approx(posynomial_value(posynomial, point))

        rng = np.random.default_rng(1)
        for _ in range(100):
            other = {"x": float(rng.uniform(0.1, 5)), "y": float(rng.uniform(0.1, 5))}
            assert monomial.value(other) <= posynomial_value(posynomial, other) * (1 + 1e-12)


class TestAfProblem:
    def test_clamp_switches_idle_tps_off(self):
        problem = _problem(ChannelGains([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0]]), [0, 0], 2.0)
        assert problem.clamp([0.0, 0.7, 1.5]).tolist() == [RHO_MIN, 0.0, 0.0]
        assert problem.initial_rho().tolist() == [1.0, 0.0, 0.0]

    def test_regimes(self):
        assert AfRegime.of(0.25) == AfRegime.BELOW_ONE
        assert AfRegime.of(1.0) == AfRegime.ONE
        assert AfRegime.of(4.0) == AfRegime.ABOVE_ONE

    @pytest.mark.parametrize("alpha", [0.5, 1.0, 2.0, 3.0])
    def test_utility_matches_the_set_function(self, alpha):
        gains = random_gains(9, 5, 2)
        util = random_utility(9, alpha, 5)
        association = Association.from_tps([0, 1, 1, 0, 1], 2)
        problem = AfProblem(gains, util, served_tuples(association), 0)
        rho = np.array([0.8, 0.3])
        rates = rate_matrix(gains, rho, mc_samples=0)
        expected = system_utility(association, kkt_gamma(association, rates, util), rates, util)
        assert problem.utility(rho) == pytest.approx(expected, rel=1e-9)

    def test_empty_and_dead_links_rejected(self):
        gains = ChannelGains([[1.0, 0.0]])
        util = UtilityConfig.uniform(2.0, 1)
        with pytest.raises(ValueError, match="no served tuples"):
            AfProblem(gains, util, [], 0)
        with pytest.raises(ValueError, match="zero link gain"):
            AfProblem(gains, util, [ServedTuple(0, 1)], 0)

    def test_fractional_tuples(self):
        x = np.array([[0.7, 0.3, 0.0], [0.0, 1e-9, 1.0]])
        served = fractional_served_tuples(x)
        assert [(e.user, e.tp) for e in served] == [(0, 0), (0, 1), (1, 2)]
        assert served[1].factor == pytest.approx(0.3)

    @pytest.mark.parametrize("kwargs", [{"outer_tol": 0.0}, {"max_outer": 0}, {"inner_tol": -1.0},
                                        {"admm_penalty": 0.0}, {"price_step": 0.0}, {"price_warmup": 0}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            AfConfig(**kwargs)


class TestOptimizeAf:
    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_lone_tp_stays_fully_active(self, alpha):
        gains = ChannelGains([[4.0], [0.5]])
        result = optimize_af(Association.from_tps([0, 0], 1), gains, UtilityConfig.uniform(alpha, 2))
        assert result.rho[0] == pytest.approx(1.0, abs=1e-6)
        assert result.converged

    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_symmetric_instance_gives_symmetric_fractions(self, alpha):
        gains = ChannelGains([[10.0, 6.0], [6.0, 10.0]])
        result = optimize_af(Association.from_tps([0, 1], 2), gains, UtilityConfig.uniform(alpha, 2))
        assert result.rho[0] == pytest.approx(result.rho[1], abs=1e-5)

    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_history_is_monotone(self, alpha):
        for seed in range(3):
            gains = random_gains(60 + seed, 5, 3)
            util = random_utility(60 + seed, alpha, 5)
            association = Association.from_tps([0, 1, 2, 0, 1], 3)
            result = optimize_af(association, gains, util)
            problem = AfProblem(gains, util, served_tuples(association), 0)
            for before, after in zip(result.history, result.history[1:]):
                assert problem.improves(after, before)
            assert result.utility_history[-1] >= result.utility_history[0] - 1e-12
            assert result.history[-1] == pytest.approx(problem.objective(result.rho))

    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_no_worse_than_a_grid(self, alpha):
        gains = ChannelGains([[20.0, 15.0], [15.0, 2.0]])
        util = UtilityConfig.uniform(alpha, 2)
        association = Association.from_tps([0, 1], 2)
        result = optimize_af(association, gains, util)
        problem = AfProblem(gains, util, served_tuples(association), 0)
        _, best = grid_search_rho(problem)
        achieved = problem.objective(result.rho)
        assert problem.improves(achieved, best) or achieved == pytest.approx(best, rel=1e-2)

    @pytest.mark.parametrize("alpha", [0.5, 1.0, 3.0])
    def test_monotone_on_many_instances(self, alpha):
        for seed in range(50):
            gains = random_gains(1000 + seed, 3, 2)
            util = random_utility(1000 + seed, alpha, 3)
            association = Association.from_tps([0, 1, seed % 2], 2)
            result = optimize_af(association, gains, util)
            problem = AfProblem(gains, util, served_tuples(association), 0)
            for before, after in zip(result.history, result.history[1:]):
                assert problem.improves(after, before)

    @pytest.mark.parametrize("alpha", [0.5, 1.0, 3.0])
    def test_weakly_coupled_pairs_reach_the_grid(self, alpha):
        rng = np.random.default_rng(int(alpha * 10))
        for _ in range(10):
            own, cross = rng.uniform(10.0, 100.0, size=2), rng.uniform(0.1, 5.0, size=2)
            gains = ChannelGains([[own[0], cross[0]], [cross[1], own[1]]])
            util = UtilityConfig.uniform(alpha, 2)
            association = Association.from_tps([0, 1], 2)
            result = optimize_af(association, gains, util)
            problem = AfProblem(gains, util, served_tuples(association), 0)
            _, best = grid_search_rho(problem)
            achieved = problem.objective(result.rho)
            assert problem.improves(achieved, best) or achieved == pytest.approx(best, rel=1e-2)

    def test_fractional_association(self):
        gains = ChannelGains([[5.0, 4.0], [1.0, 3.0]])
        x = np.array([[0.5, 0.5], [0.0, 1.0]])
        result = optimize_af(x, gains, UtilityConfig.uniform(2.0, 2))
        assert np.all((result.rho >= RHO_MIN) & (result.rho <= 1.0))

    def test_history_csv(self, tmp_path):
        gains = ChannelGains([[10.0, 6.0], [6.0, 10.0]])
        result = optimize_af(Association.from_tps([0, 1], 2), gains, UtilityConfig.uniform(2.0, 2))
        path = tmp_path / "af.csv"
        export_history_csv(path, result)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["iteration", "objective", "utility"]
        assert len(rows) == len(result.history) + 1
        assert float(rows[-1][1]) == result.history[-1]

    @pytest.mark.parametrize("alpha", [0.25, 0.5, 0.75, 3.0])
    @pytest.mark.parametrize("num_users, num_tps", [(2, 2), (4, 2), (3, 3), (6, 3)])
    def test_random_instances(self, alpha, num_users, num_tps):
        for seed in range(3):
            gains = random_gains(seed, num_users, num_tps)
            util = random_utility(seed, alpha, num_users)
            association = Association.from_tps([k % num_tps for k in range(num_users)], num_tps)
            result = optimize_af(association, gains, util)
            problem = AfProblem(gains, util, served_tuples(association), 0)
            assert np.all((result.rho >= RHO_MIN) & (result.rho <= 1.0))
            for before, after in zip(result.history, result.history[1:]):
                assert problem.improves(after, before)
            assert result.utility_history[-1] >= result.utility_history[0] - 1e-12

    def test_below_one_step_keeps_y_above_half_of_c(self):
        gains = random_gains(3, 4, 2)
        problem = AfProblem(gains, random_utility(3, 0.5, 4), served_tuples(Association.from_tps([0, 1, 0, 1], 2)), 0)
        state = af_step_alpha_lt1(mmse_update(problem, problem.initial_rho()), problem, AfConfig())
        assert state.C == pytest.approx(2 * float(np.sum(interference_free_terms(problem))))
        assert state.y >= state.C / 2 * (1 - 1e-6)
        assert np.all((state.rho >= RHO_MIN) & (state.rho <= 1.0))

    def test_history_csv_cells_are_plain_floats(self, tmp_path):
        gains = random_gains(4, 3, 2)
        util = random_utility(4, 0.5, 3)
        result = optimize_af(Association.from_tps([0, 1, 0], 2), gains, util)
        path = tmp_path / "af.csv"
        export_history_csv(path, result)
        text = path.read_text()
        assert "np." not in text
        assert [float(row.split(",")[1]) for row in text.splitlines()[1:]] == result.history


class TestDistributedAf:
    @pytest.mark.parametrize("alpha", [1.0, 2.0, 3.0])
    @pytest.mark.parametrize("gains, tps", [
        ([[20.0, 15.0], [15.0, 2.0]], [0, 1]),
        ([[20.0, 15.0, 5.0], [15.0, 2.0, 6.0], [4.0, 8.0, 18.0]], [0, 1, 2]),
    ])
    def test_fractions_match_the_centralized_solver(self, alpha, gains, tps):
        gains = ChannelGains(gains)
        util = UtilityConfig.uniform(alpha, len(tps))
        association = Association.from_tps(tps, gains.num_tps)
        centralized = optimize_af(association, gains, util)
        distributed = optimize_af_distributed(association, gains, util)
        assert np.max(np.abs(distributed.rho - centralized.rho)) <= 1e-3
        assert distributed.consensus_gap < 1e-4

    @pytest.mark.parametrize("alpha", ALPHAS)
    def test_agrees_with_the_centralized_solver(self, alpha):
        gains = ChannelGains([[20.0, 15.0], [15.0, 2.0]])
        util = UtilityConfig.uniform(alpha, 2)
        association = Association.from_tps([0, 1], 2)
        centralized = optimize_af(association, gains, util)
        distributed = optimize_af_distributed(association, gains, util)
        problem = AfProblem(gains, util, served_tuples(association), 0)
        assert problem.objective(distributed.rho) == pytest.approx(problem.objective(centralized.rho), rel=1e-3)
        assert distributed.price_history
        assert distributed.iterations > 0
        assert distributed.consensus_gap < 1e-3

    def test_price_history_csv(self, tmp_path):
        gains = ChannelGains([[10.0, 6.0], [6.0, 10.0]])
        result = optimize_af_distributed(Association.from_tps([0, 1], 2), gains, UtilityConfig.uniform(2.0, 2))
        path = tmp_path / "prices.csv"
        export_price_history_csv(path, result)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["outer", "iteration", "consensus_gap", "max_price"]
        assert len(rows) == len(result.price_history) + 1

    def test_price_steps_diminish(self):
        cfg = AfConfig()
        steps = [price_step_size(cfg, t) for t in range(1, 1001)]
        assert steps[0] == 1.0
        assert all(after <= before for before, after in zip(steps, steps[1:]))
        assert steps[199] == pytest.approx(math.sqrt(50 / 200))
        assert steps[-1] == pytest.approx(math.sqrt(50 / 1000))

        constant = AfConfig(price_schedule=PriceSchedule.CONSTANT)
        assert {price_step_size(constant, t) for t in (1, 10, 1000)} == {1.0}

    def test_constant_price_steps_reach_the_same_fractions(self):
        gains = ChannelGains([[20.0, 15.0], [15.0, 2.0]])
        util = UtilityConfig.uniform(2.0, 2)
        association = Association.from_tps([0, 1], 2)
        diminishing = optimize_af_distributed(association, gains, util)
        constant = optimize_af_distributed(association, gains, util, AfConfig(price_schedule=PriceSchedule.CONSTANT))
        assert np.max(np.abs(diminishing.rho - constant.rho)) <= 1e-3

    def test_price_history_records_every_round(self):
        gains = ChannelGains([[10.0, 6.0], [6.0, 10.0]])
        result = optimize_af_distributed(Association.from_tps([0, 1], 2), gains, UtilityConfig.uniform(1.0, 2))
        assert len(result.price_history) == result.iterations
        assert result.price_history[0].iteration == 1
