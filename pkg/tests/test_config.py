import json

import pytest

from memefusion.config import (
    apply_overrides,
    cache_dir,
    canonical_json,
    config_hash,
    default_config,
    get_path,
    load_config,
    resolve_config,
)
from memefusion.errors import ConfigError


def test_defaults_resolve():
    cfg = resolve_config(default_config())
    assert cfg["model"]["p"] == 16      # mock scale
    assert cfg["model"]["h"] == 16
    assert cfg["train"]["batch_size"] == 16
    assert cfg["train"]["lr"] == 1e-4
    assert cfg["train"]["seed"] == 0


def test_pretrained_scale_defaults():
    cfg = default_config()
    cfg["backbone"]["kind"] = "pretrained"
    cfg["backbone"]["source"] = "/somewhere"
    cfg["phi"]["kind"] = "pretrained"
    cfg["phi"]["source"] = "/elsewhere"
    cfg = resolve_config(cfg)
    assert cfg["model"]["p"] == 1024
    assert cfg["train"]["batch_size"] == 64


def test_pretrained_requires_source():
    cfg = default_config()
    cfg["backbone"]["kind"] = "pretrained"
    with pytest.raises(ConfigError):
        resolve_config(cfg)


def test_env_seed_fallback(monkeypatch):
    monkeypatch.setenv("MEMEFUSION_SEED", "42")
    cfg = resolve_config(default_config())
    assert cfg["train"]["seed"] == 42
    monkeypatch.delenv("MEMEFUSION_SEED")
    cfg = resolve_config(default_config())
    assert cfg["train"]["seed"] == 0


def test_explicit_seed_beats_env(monkeypatch):
    monkeypatch.setenv("MEMEFUSION_SEED", "42")
    cfg = default_config()
    cfg["train"]["seed"] = 7
    assert resolve_config(cfg)["train"]["seed"] == 7


def test_overrides_parse_json_values():
    cfg = default_config()
    apply_overrides(cfg, ["train.lr=3e-5", "ablation.use_combiner=false",
                          "data.root=/data/x", "model.p=8"])
    assert cfg["train"]["lr"] == 3e-5
    assert cfg["ablation"]["use_combiner"] is False
    assert cfg["data"]["root"] == "/data/x"
    assert cfg["model"]["p"] == 8


def test_override_rejects_unknown_key():
    with pytest.raises(ConfigError):
        apply_overrides(default_config(), ["train.nope=1"])
    with pytest.raises(ConfigError):
        apply_overrides(default_config(), ["nosection.x=1"])
    with pytest.raises(ConfigError):
        apply_overrides(default_config(), ["train=1"])
    with pytest.raises(ConfigError):
        apply_overrides(default_config(), ["no-equals-sign"])


def test_load_config_merges_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"train": {"lr": 0.5}, "data": {"n_synthetic": 8}}))
    cfg = load_config(path, overrides=["train.lr=0.25"])
    assert cfg["train"]["lr"] == 0.25          # override wins over file
    assert cfg["data"]["n_synthetic"] == 8
    assert cfg["train"]["weight_decay"] == 1e-4  # default survives


def test_load_config_unknown_file_key(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"trian": {"lr": 0.5}}))
    with pytest.raises(ConfigError) as exc:
        load_config(path)
    assert "trian" in str(exc.value)


def test_load_config_missing_or_invalid(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_enum_validation():
    cfg = default_config()
    cfg["data"]["source"] = "imagenet"
    with pytest.raises(ConfigError) as exc:
        resolve_config(cfg)
    assert "data.source" in str(exc.value)


def test_numeric_validation():
    cfg = default_config()
    cfg["train"]["lr"] = -1.0
    with pytest.raises(ConfigError):
        resolve_config(cfg)
    cfg = default_config()
    cfg["train"]["stage2_epochs"] = 0
    with pytest.raises(ConfigError):
        resolve_config(cfg)


def test_hash_stable_under_key_order():
    a = resolve_config(default_config())
    b = json.loads(json.dumps(a))
    b_shuffled = {k: b[k] for k in reversed(list(b))}
    assert config_hash(a) == config_hash(b_shuffled)
    assert canonical_json(a) == canonical_json(b_shuffled)


def test_hash_changes_with_any_value():
    a = resolve_config(default_config())
    b = json.loads(canonical_json(a))
    b["train"]["seed"] = 99
    assert config_hash(a) != config_hash(b)


def test_get_path():
    cfg = default_config()
    assert get_path(cfg, "train.lr") == 1e-4
    with pytest.raises(ConfigError):
        get_path(cfg, "train.nope")


def test_cache_dir_env(monkeypatch, tmp_path):
    monkeypatch.setenv("MEMEFUSION_CACHE", str(tmp_path / "c"))
    assert cache_dir() == tmp_path / "c"
