import json
import os

import pytest

from microdense.config import ConfigError, dump_config, load_config, parse_config
from microdense.planner import ArchConfig
from microdense.trainer import TrainConfig

from conftest import CONFIGS


@pytest.mark.parametrize("name", sorted(os.listdir(CONFIGS)))
def test_shipped_configs_state_every_default(name):
    doc = json.load(open(os.path.join(CONFIGS, name)))
    assert set(doc["arch"]) == set(ArchConfig().to_dict())
    assert set(doc["train"]) == set(TrainConfig().to_dict())
    cfg = load_config(os.path.join(CONFIGS, name))
    assert parse_config(dump_config(cfg)) == cfg


def test_parse_error_has_line_and_column():
    with pytest.raises(ConfigError, match=r"cfg.json:3:5"):
        parse_config('{\n  "arch": {},\n    oops\n}', "cfg.json")


def test_unknown_field_and_section():
    with pytest.raises(ConfigError, match="arch.widht"):
        parse_config('{"arch": {"widht": 3}}')
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config('{"model": {}}')
    with pytest.raises(ConfigError, match="ablation.foo"):
        parse_config('{"ablation": {"foo": 1}}')


def test_type_errors_name_field():
    with pytest.raises(ConfigError, match="train.iterations"):
        parse_config('{"train": {"iterations": "many"}}')
    with pytest.raises(ConfigError, match="arch.N"):
        parse_config('{"arch": {"N": true}}')
    with pytest.raises(ConfigError, match="section 'arch'"):
        parse_config('{"arch": {"N": 31}}')


def test_seed_env_override(monkeypatch):
    monkeypatch.setenv("MICRODENSE_SEED", "17")
    assert parse_config('{"train": {"seed": 3}}').train.seed == 17


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/cfg.json")
