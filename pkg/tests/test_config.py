import json

import pytest

from ddoslab.config import DEFAULTS, SEED_ENV, ConfigError, load_config, toy_config


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


BASE = {"schema": "s.json", "silos": {"A": "a.csv"}}


def test_defaults_follow_the_documented_setup():
    f = DEFAULTS["federation"]
    assert (f["rounds"], f["local_epochs"], f["weighting"]) == (10, 50, "samples")
    g = DEFAULTS["ganomaly"]
    assert tuple(g["hidden"]) == (1024, 512, 256) and g["latent_dim"] == 32
    assert (g["w_adv"], g["w_con"], g["w_enc"]) == (1, 50, 1)
    assert DEFAULTS["generate"]["n"] == 100000
    assert DEFAULTS["evaluation"]["q"] == 0.95


def test_paths_resolve_against_config_directory(tmp_path):
    (tmp_path / "sub").mkdir()
    cfg = load_config(write(tmp_path / "sub", BASE))
    assert cfg["schema"] == str((tmp_path / "sub" / "s.json").resolve())
    assert cfg["silos"]["A"] == str((tmp_path / "sub" / "a.csv").resolve())
    assert cfg["ganomaly"]["lr"] == DEFAULTS["ganomaly"]["lr"]


def test_comment_keys_are_allowed(tmp_path):
    assert load_config(write(tmp_path, {**BASE, "_note": "toy run"}))["_note"] == "toy run"


def test_partial_sections_merge_with_defaults(tmp_path):
    cfg = load_config(write(tmp_path, {**BASE, "ganomaly": {"latent_dim": 4}}))
    assert cfg["ganomaly"]["latent_dim"] == 4
    assert cfg["ganomaly"]["hidden"] == DEFAULTS["ganomaly"]["hidden"]


def test_seed_precedence(tmp_path, monkeypatch):
    p = write(tmp_path, {**BASE, "seed": 3})
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert load_config(p)["seed"] == 3
    monkeypatch.setenv(SEED_ENV, "11")
    assert load_config(p)["seed"] == 11
    assert load_config(p, seed=5)["seed"] == 5
    monkeypatch.setenv(SEED_ENV, "eleven")
    with pytest.raises(ConfigError):
        load_config(p)


@pytest.mark.parametrize("bad", [
    {"silos": {"A": "a.csv"}},
    {**BASE, "silos": {}},
    {**BASE, "federation": {"weighting": "median"}},
    {**BASE, "federation": {"rounds": 0}},
    {**BASE, "external": {"X": "x.csv", "Y": "y.csv"}},
    {**BASE, "external": {"A": "x.csv"}},
    {**BASE, "unknown_key": 1},
])
def test_invalid_configs(tmp_path, bad):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, bad))


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.json")
    (tmp_path / "x.json").write_text("{nope")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(tmp_path / "x.json")


def test_toy_config_is_valid(toy_dir):
    p = write(toy_dir, toy_config("."), "toy_cfg.json")
    cfg = load_config(p)
    assert set(cfg["silos"]) == {"A", "B", "C"} and set(cfg["external"]) == {"X"}
