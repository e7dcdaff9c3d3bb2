import json
import math

import numpy as np
import pytest

from common.errors import InfeasibleUserError, InstanceError
from common.model import (ChannelGains, FadingModel, ScenarioConfig, Topology, UtilityConfig, export_gains_csv,
                          generate_topology, load_instance, save_instance)
from common.tp_profile import MacroProfile, PicoProfile, TpKind, get_tp_profile


def _write(path, instance: dict):
    with open(path, "w") as f:
        f.write(json.dumps(instance))
    return path


def _instance(**overrides) -> dict:
    instance = {
        "K": 2,
        "B": 2,
        "tp_kind": ["macro", "pico"],
        "slow_gain": [[1.0, 2.0], [3.0, 4.0]],
        "weights": [0.5, 0.5],
        "alpha": 1.0,
    }
    instance.update(overrides)
    return instance


class TestGenerateTopology:
    def test_minimal_instance(self):
        cfg = ScenarioConfig(rng_seed=7, num_sectors=1, picos_per_sector=0, users_per_sector=1)
        topology, gains = generate_topology(cfg)
        assert topology.num_tps == 1
        assert topology.num_users == 1
        assert gains.slow_gain[0, 0] > 0

    def test_default_scenario_size(self):
        topology, gains = generate_topology(ScenarioConfig())
        assert (topology.num_tps, topology.num_users) == (33, 99)
        assert gains.slow_gain.shape == (99, 33)
        assert topology.tp_kind.count(TpKind.MACRO) == 3

    def test_same_seed_is_bit_identical(self):
        cfg = ScenarioConfig(rng_seed=11, num_sectors=1, picos_per_sector=3, users_per_sector=5)
        _, first = generate_topology(cfg)
        _, second = generate_topology(cfg)
        assert first == second
        assert first.slow_gain.tobytes() == second.slow_gain.tobytes()

    def test_different_seeds_differ(self):
        _, first = generate_topology(ScenarioConfig(rng_seed=1, num_sectors=1, users_per_sector=4))
        _, second = generate_topology(ScenarioConfig(rng_seed=2, num_sectors=1, users_per_sector=4))
        assert first != second

    def test_every_user_reaches_some_tp(self):
        _, gains = generate_topology(ScenarioConfig(rng_seed=3))
        assert np.all(gains.slow_gain.max(axis=1) > 0)

    @pytest.mark.parametrize("field, value", [("num_sectors", 0), ("users_per_sector", 0), ("picos_per_sector", -1)])
    def test_rejects_empty_layouts(self, field, value):
        with pytest.raises(InstanceError, match=field):
            ScenarioConfig(**{field: value})


class TestScenarioConfig:
    def test_unknown_keys_rejected(self):
        with pytest.raises(InstanceError, match="unknown keys"):
            ScenarioConfig.from_dict({"num_sectors": 1, "sectors": 3})

    def test_profiles_from_dicts(self):
        cfg = ScenarioConfig.from_dict({"pico": {"tx_power_dbm": 24.0, "pathloss_intercept_db": 30.6,
                                                 "pathloss_exponent": 3.67}})
        assert cfg.pico.tx_power_dbm == 24.0
        assert cfg.macro == MacroProfile

    def test_json_and_toml_files_agree(self, tmp_path):
        json_path = _write(tmp_path / "scenario.json", {"rng_seed": 5, "num_sectors": 2, "fading_model": "rayleigh"})
        toml_path = tmp_path / "scenario.toml"
        toml_path.write_text('rng_seed = 5\nnum_sectors = 2\nfading_model = "rayleigh"\n')
        from_json = ScenarioConfig.from_file(json_path)
        assert from_json == ScenarioConfig.from_file(toml_path)
        assert from_json.fading_model == FadingModel.RAYLEIGH_UNIT

    def test_round_trips_through_dict(self):
        cfg = ScenarioConfig(rng_seed=9, picos_per_sector=2)
        assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg

    def test_profile_lookup(self):
        assert get_tp_profile(TpKind.PICO) == PicoProfile
        assert TpKind.parse("Macro") == TpKind.MACRO
        with pytest.raises(ValueError, match="femto"):
            TpKind.parse("femto")


class TestInstanceFiles:
    def test_save_then_load(self, tmp_path):
        topology, gains = generate_topology(ScenarioConfig(rng_seed=4, num_sectors=1, picos_per_sector=2,
                                                           users_per_sector=6))
        util = UtilityConfig.uniform(0.5, topology.num_users)
        path = tmp_path / "instance.json"
        save_instance(path, topology, gains, util)

        loaded_topology, loaded_gains, loaded_util = load_instance(path)
        assert loaded_topology == topology
        assert loaded_gains == gains
        assert loaded_util == util

    def test_negative_gain_names_the_link(self, tmp_path):
        path = _write(tmp_path / "bad.json", _instance(slow_gain=[[1.0, 2.0], [3.0, -4.0]]))
        with pytest.raises(InstanceError, match=r"slow_gain\[1\]\[1\]"):
            load_instance(path)

    def test_weights_must_sum_to_one(self, tmp_path):
        path = _write(tmp_path / "bad.json", _instance(weights=[0.45, 0.45]))
        with pytest.raises(InstanceError, match="must sum to 1"):
            load_instance(path)

    def test_weights_default_to_uniform(self, tmp_path):
        instance = _instance(K=3, slow_gain=[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        del instance["weights"]
        _, gains, util = load_instance(_write(tmp_path / "plain.json", instance))
        assert gains.num_users == 3
        assert util == UtilityConfig.uniform(1.0, 3)
        assert util.weights.sum() == pytest.approx(1.0)

    def test_wrong_row_length(self, tmp_path):
        path = _write(tmp_path / "bad.json", _instance(slow_gain=[[1.0, 2.0], [3.0]]))
        with pytest.raises(InstanceError, match=r"slow_gain\[1\]"):
            load_instance(path)

    def test_missing_field(self, tmp_path):
        instance = _instance()
        del instance["alpha"]
        with pytest.raises(InstanceError, match="alpha: missing field"):
            load_instance(_write(tmp_path / "bad.json", instance))

    def test_unreadable_file(self, tmp_path):
        (tmp_path / "broken.json").write_text("{not json")
        with pytest.raises(InstanceError):
            load_instance(tmp_path / "broken.json")

    def test_gains_csv(self, tmp_path):
        gains = ChannelGains([[1.0, 0.5], [0.0, 2.0]])
        export_gains_csv(tmp_path / "gains.csv", gains)
        lines = (tmp_path / "gains.csv").read_text().splitlines()
        assert len(lines) == 3


class TestValueTypes:
    def test_user_without_any_link(self):
        with pytest.raises(InfeasibleUserError, match="user 1") as info:
            ChannelGains([[1.0, 0.0], [0.0, 0.0]])
        assert info.value.user == 1

    def test_gains_are_read_only(self):
        gains = ChannelGains([[1.0]])
        with pytest.raises(ValueError):
            gains.slow_gain[0, 0] = 2.0

    def test_topology_kind_count(self):
        with pytest.raises(InstanceError, match="tp_kind"):
            Topology(1, 2, (TpKind.MACRO,))

    @pytest.mark.parametrize("alpha", [0.0, -1.0, math.inf])
    def test_alpha_must_be_positive(self, alpha):
        with pytest.raises(InstanceError, match="alpha"):
            UtilityConfig(alpha, [1.0])

    def test_normalized_weights_lie_on_the_simplex(self):
        util = UtilityConfig.normalized(2.0, np.random.default_rng(0).uniform(0.1, 10.0, size=99))
        assert abs(np.sum(util.weights) - 1.0) <= 1e-12

    def test_fading_model_names(self):
        assert FadingModel.parse("no-fading") == FadingModel.NONE
        with pytest.raises(InstanceError, match="fading_model"):
            FadingModel.parse("rician")
