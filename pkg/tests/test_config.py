import json

import pytest
import yaml

from desta.cli import TOY_CONFIG
from desta.config import ConfigError, ProjectConfig, config_from_dict, dump_config, load_config


def test_defaults_and_round_trip(tmp_path):
    assert load_config(None) == ProjectConfig()
    cfg = config_from_dict(TOY_CONFIG)
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump(json.loads(dump_config(cfg))))
    assert load_config(path) == cfg


@pytest.mark.parametrize("data,match", [
    ({"colour": 1}, "top-level"),
    ({"lm": {"width": 3}}, r"lm: unknown keys \['width'\]"),
    ({"adapter": {"kind": "rnn"}}, "adapter.kind"),
    ({"eval": {"scales": [1.0, 1.5]}}, "outside"),
    ({"pipeline": {"generator": "magic"}}, "generator"),
    ({"seed": "zero"}, "seed"),
    ({"trainer": [1, 2]}, "mapping"),
])
def test_rejects_bad_configs(data, match):
    with pytest.raises(ConfigError, match=match):
        config_from_dict(data)


def test_trainer_profiles_and_overrides():
    cfg = config_from_dict(TOY_CONFIG)
    a = cfg.trainer_config()
    b = cfg.trainer_config("trainer_instruct", epochs=7)
    assert (a.lr_max, a.epochs) == (0.01, 5)
    assert (b.lr_max, b.epochs) == (0.005, 7)
    assert a.seed != b.seed
    with pytest.raises(ConfigError):
        cfg.trainer_config("warmup")


def test_model_config_follows_sections():
    cfg = config_from_dict(TOY_CONFIG)
    mc = cfg.model_config(515)
    assert mc.lm.vocab_size == 515 and mc.adapter.num_queries == 32
    assert (mc.lora.rank, mc.lora.alpha) == (8, 8.0) and mc.encoder.num_layers == 4
