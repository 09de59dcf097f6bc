"""
実行設定と永続化（CSV・JSON）のテスト
"""
import math
import shutil
from pathlib import Path

import pandas as pd
import pytest

from config import PACKAGE_DIR, ConfigError, config_from_dict, load_config
from storage import (
    OUTPUT_ENV_VAR,
    default_output_dir,
    load_json_file,
    read_csv,
    save_json_file,
    seed_dir,
    write_csv,
)

HERE = Path(__file__).resolve().parent


def _write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


# ============================================
# 既定値と上書き
# ============================================

def test_defaults_without_file(monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV_VAR, raising=False)
    config = load_config()
    assert config.run.circuit == "opamp"
    assert Path(config.run.netlist) == PACKAGE_DIR / "netlists" / "opamp.net"
    assert config.run.output_dir == "runs"
    assert config.env.train_fidelity == "fine"
    assert config.env.max_episode_len == 50
    assert config.ppo.episodes_total == 35000
    assert config.ppo.gamma == 0.99


def test_rfpa_circuit_defaults():
    config = load_config(overrides=['run.circuit="rfpa"'])
    assert config.env.train_fidelity == "coarse"
    assert config.env.deploy_fidelity == "fine"
    assert config.env.max_episode_len == 30
    assert config.ppo.episodes_total == 3500
    assert [d.name for d in config.spec_defs()] == ["P", "E"]
    explicit = load_config(overrides=['run.circuit="rfpa"', "ppo.episodes_total=700"])
    assert explicit.ppo.episodes_total == 700


def test_output_dir_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_ENV_VAR, str(tmp_path / "elsewhere"))
    assert default_output_dir() == str(tmp_path / "elsewhere")
    assert load_config().run.output_dir == str(tmp_path / "elsewhere")
    assert load_config(out="explicit").run.output_dir == "explicit"


def test_overrides_are_coerced():
    config = load_config(overrides=[
        "ppo.lr=1e-3",
        "run.seeds=[4, 5]",
        "run.record_wall_time=true",
        "policy.variant=gat_fc",
        "policy.fcnn_layers=[16]",
        "ga.population_size=8",
    ])
    assert config.ppo.lr == 1e-3
    assert config.run.seeds == [4, 5]
    assert config.run.record_wall_time is True
    assert config.policy.variant == "gat_fc"
    assert config.policy.fcnn_layers == [16]
    assert config.ga.population_size == 8


def test_seed_episodes_and_out_shortcuts(tmp_path):
    config = load_config(seed=9, episodes=120, out=str(tmp_path))
    assert config.run.seeds == [9]
    assert config.ppo.episodes_total == 120
    assert config.run.output_dir == str(tmp_path)


def test_spec_range_override():
    config = load_config(overrides=["specs.G.lo=250", "specs.G.hi=450"])
    g = config.spec_defs()[0]
    assert (g.sample_lo, g.sample_hi) == (250.0, 450.0)
    assert g.direction == "maximize"


# ============================================
# エラー
# ============================================

def test_unknown_key_names_the_section(tmp_path):
    path = _write(tmp_path, "[env]\nfoo = 1\n")
    with pytest.raises(ConfigError, match=r"unknown key 'foo' in \[env\]"):
        load_config(path)


@pytest.mark.parametrize("overrides, message", [
    (["bogus.key=1"], "unknown section"),
    (["ppo.episodes_total=1.5"], "ppo.episodes_total: expected an integer"),
    (["run.record_wall_time=maybe"], "expected true/false"),
    (["ppo.lr=fast"], "ppo.lr: expected a number"),
    (["env.train_fidelity=medium"], "env.train_fidelity"),
    (["env.initial_state=random"], "env.initial_state"),
    (["policy.variant=cnn"], "policy.variant"),
    (["fom.variants=[\"gcn_fc\", \"rnn\"]"], "unknown variant 'rnn'"),
    (["ppo.gamma=0"], "ppo.gamma"),
    (["ga.population_size=1"], "ga.population_size"),
    (["run.seeds=[]"], "run.seeds"),
    (["run.seeds=[0, -1]"], "run.seeds: seeds must be >= 0"),
    (["run.circuit=lna"], "unknown circuit 'lna'"),
    (["specs.X.lo=1"], r"unknown spec '\[specs.X\]'"),
    (["specs.G.lo=600"], "specs:"),
    (["specs.G.mid=1"], "unknown key 'mid'"),
    (["no_equals_sign"], "section.key=value"),
    (["toplevel=1"], "section.key"),
])
def test_invalid_configs(overrides, message):
    with pytest.raises(ConfigError, match=message):
        load_config(overrides=overrides)


def test_missing_file_and_bad_toml(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(str(tmp_path / "absent.toml"))
    with pytest.raises(ConfigError):
        load_config(_write(tmp_path, "[run\ncircuit = "))


def test_missing_netlist(tmp_path):
    path = _write(tmp_path, '[run]\nnetlist = "nowhere.net"\n')
    with pytest.raises(ConfigError, match="run.netlist: file not found"):
        load_config(path)


def test_relative_netlist_resolves_against_config_dir(tmp_path):
    cfg_dir = tmp_path / "cfg"
    cfg_dir.mkdir()
    shutil.copy(HERE / "netlists" / "opamp.net", cfg_dir / "mine.net")
    path = _write(cfg_dir, '[run]\nnetlist = "mine.net"\n')
    config = load_config(path)
    assert Path(config.run.netlist) == cfg_dir / "mine.net"
    assert config.circuit_setup().space.size == 15


@pytest.mark.parametrize("name", ["opamp.toml", "rfpa.toml", "rfpa_fom.toml"])
def test_shipped_configs_load(name):
    config = load_config(str(HERE / "configs" / name))
    assert len(config.run.seeds) == 6
    assert Path(config.run.netlist).exists()
    expected = 35000 if config.run.circuit == "opamp" else 3500
    assert config.ppo.episodes_total == expected


# ============================================
# ハッシュと復元
# ============================================

def test_config_hash_is_stable():
    a = load_config(out="x")
    b = load_config(out="x")
    assert a.config_hash() == b.config_hash()
    c = load_config(out="x", overrides=["ppo.lr=1e-3"])
    assert c.config_hash() != a.config_hash()


def test_config_from_dict_round_trip():
    config = load_config(out="x", overrides=["policy.variant=mlp_baseline", "specs.PM.lo=50"])
    restored = config_from_dict(config.to_dict())
    assert restored.to_dict() == config.to_dict()
    assert restored.config_hash() == config.config_hash()


# ============================================
# 永続化
# ============================================

def test_csv_writes_nan_as_empty(tmp_path):
    df = pd.DataFrame({"batch": [1, 2], "deploy_acc": [math.nan, 0.25], "name": ["a", "b"]})
    path = write_csv(df, tmp_path / "sub" / "m.csv")
    assert path.read_text(encoding="utf-8") == "batch,deploy_acc,name\n1,,a\n2,0.25,b\n"
    back = read_csv(path)
    assert math.isnan(back["deploy_acc"][0])
    assert back["deploy_acc"][1] == 0.25


def test_csv_floats_round_trip_exactly(tmp_path):
    values = [-1 / 3, 1.8e7 + 0.123456789, 2.5e-7, 1e-300, 0.1 + 0.2, math.pi * 1e12]
    trace = pd.DataFrame({"step": range(len(values)), "M1.W": values})
    back = read_csv(write_csv(trace, tmp_path / "trace.csv"))
    assert back["M1.W"].tolist() == values
    assert back["step"].tolist() == list(range(len(values)))


def test_json_helpers(tmp_path):
    assert load_json_file(tmp_path / "none.json", default={}) == {}
    save_json_file(tmp_path / "a" / "b.json", {"x": [1.5, 2]})
    assert load_json_file(tmp_path / "a" / "b.json") == {"x": [1.5, 2]}
    assert not (tmp_path / "a" / "b.json.tmp").exists()


def test_seed_dir_is_created(tmp_path):
    path = seed_dir(tmp_path, 3)
    assert path == tmp_path / "seed_3"
    assert path.is_dir()
    assert [p.name for p in tmp_path.iterdir()] == ["seed_3"]
