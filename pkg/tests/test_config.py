from __future__ import annotations

import json

import pytest

from regime_coupler.config import (
    SCHEMA,
    ConfigError,
    build_config,
    load_config,
    parse_ini,
    serialize_ini,
)


def test_defaults():
    cfg = load_config(None)
    assert cfg.model_name == "ou"
    assert cfg["couple"]["n_paths"] == 1000
    assert cfg["model"]["theta"] == [1.0, 2.0]
    assert not cfg.explicit


def test_ini_values_are_json():
    cfg = parse_ini("[run]\nmodel = \"logistic\"\nseed = 7\n[model]\na = [2.0, 3.0]\n"
                    "[simulate]\nsample_times = [0.5, 1.0]\n")
    assert cfg["run"]["seed"] == 7
    assert cfg["model"]["a"] == [2.0, 3.0]
    assert cfg["simulate"]["sample_times"] == [0.5, 1.0]
    assert ("run", "seed") in cfg.explicit


def test_round_trip():
    cfg = parse_ini("[run]\nmodel = meanfield\n[model]\nN = 3\n[couple]\nmeet_eps = 0.001\n")
    again = parse_ini(serialize_ini(cfg))
    assert again.sections == cfg.sections


@pytest.mark.parametrize("text", [
    "[nope]\na = 1\n",
    "[run]\ncolour = 1\n",
    "[run]\nmodel = ou\n[model]\nkappa = 1\n",
    "[run]\nmodel = unknown\n",
    "[run]\nseed = -1\n",
    "[simulate]\ndt = 0\n",
    "[couple]\nregime_x = 0\n",
    "[validate]\ninject = \"typo\"\n",
    "not an ini file",
])
def test_rejects_bad_configs(text):
    with pytest.raises(ConfigError):
        parse_ini(text)


def test_model_json_file(tmp_path):
    (tmp_path / "m.json").write_text(json.dumps({"name": "ou", "theta": [3.0, 4.0]}))
    (tmp_path / "run.ini").write_text("[run]\nmodel = m.json\n[model]\nsigma = [2.0, 2.0]\n")
    cfg = load_config(tmp_path / "run.ini")
    assert cfg.model_name == "ou"
    assert cfg["model"]["theta"] == [3.0, 4.0] and cfg["model"]["sigma"] == [2.0, 2.0]
    (tmp_path / "bad.json").write_text(json.dumps({"theta": [1.0]}))
    with pytest.raises(ConfigError):
        build_config({"run": {"model": "bad.json"}}, tmp_path)


def test_json_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"bounds": {"M": 3.0}}))
    assert load_config(p)["bounds"]["M"] == 3.0
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")


def test_schema_sections_all_serialised():
    text = serialize_ini(load_config(None))
    for name in SCHEMA:
        assert f"[{name}]" in text
