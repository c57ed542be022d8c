import json

import pytest

from fedsab.attacks import AttackConfig
from fedsab.config import ExperimentConfig, bundled_config, resolve_config
from fedsab.errors import ConfigError


def test_bundled_configs_load():
    desk = ExperimentConfig.from_json(bundled_config("desk_sab.json"))
    assert (desk.pool_size, desk.clients_per_round, desk.rounds) == (20, 5, 60)
    assert (desk.attack.start, desk.attack.duration) == (20, 20)
    full = ExperimentConfig.from_json(resolve_config("paper_scale"))
    assert full.pool_size == 3000 and full.clients_per_round == 10
    assert full.benign.lr == 0.001 and full.benign.decay == 0.0005
    assert full.attack.lr == 0.02 and full.attack.decay == 0.005
    assert full.attack.top_fraction == 0.05 and full.attack.drop_fraction == 0.2
    assert full.defenses.dp_config.mean == 1e-6 and full.defenses.dp_config.sigma == 1e-3


def test_round_trip_preserves_hash(tmp_path):
    cfg = ExperimentConfig.from_json(bundled_config("desk_sab.json"))
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2))
    back = ExperimentConfig.from_json(path)
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()
    assert cfg.replace(seed=1).config_hash() != cfg.config_hash()


def test_unknown_key_is_reported_with_path():
    with pytest.raises(ConfigError, match=r"attack.*unknown key.*'lrr'"):
        ExperimentConfig.from_dict({"attack": {"lrr": 0.1}})
    with pytest.raises(ConfigError, match="unknown key"):
        ExperimentConfig.from_dict({"roundz": 3})


@pytest.mark.parametrize(
    "data, fragment",
    [
        ({"rounds": "60"}, "rounds: expected an integer"),
        ({"benign": {"epochs": 1.5}}, "benign.epochs"),
        ({"defenses": {"dp": 1}}, "defenses.dp: expected true/false"),
        ({"attack": {"lr": True}}, "attack.lr: expected a number"),
        ({"dataset": {"shape": 28}}, "dataset.shape: expected a list"),
    ],
)
def test_type_errors_name_the_field(data, fragment):
    with pytest.raises(ConfigError, match=fragment):
        ExperimentConfig.from_dict(data)


def test_schedule_validation():
    with pytest.raises(ConfigError, match="exceeds rounds"):
        ExperimentConfig(rounds=30, attack=AttackConfig(start=20, duration=20))
    ExperimentConfig(rounds=40, attack=AttackConfig(start=20, duration=20))
    ExperimentConfig(rounds=5, attack=None)


def test_other_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(pool_size=4, clients_per_round=5)
    with pytest.raises(ConfigError):
        ExperimentConfig(attack=AttackConfig(target_class=10))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"partition": {"alpha": 0}})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"defenses": {"partfedavg_drop": 1.0}})


def test_null_attack_means_clean_run():
    assert ExperimentConfig.from_dict({"attack": None}).attack is None


def test_bad_json_and_missing_file(tmp_path):
    (tmp_path / "bad.json").write_text("{ nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        ExperimentConfig.from_json(tmp_path / "bad.json")
    with pytest.raises(ConfigError, match="cannot read"):
        ExperimentConfig.from_json(tmp_path / "missing.json")
    with pytest.raises(ConfigError):
        bundled_config("nothing.json")
