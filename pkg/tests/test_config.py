import json

import pytest

from carparse.config import (CONFIG_VERSION, PipelineConfig, load_config, manifest, substream_seed,
                             versions)
from carparse.errors import ConfigError


def test_defaults_round_trip():
    cfg = PipelineConfig()
    back = PipelineConfig.from_dict(json.loads(cfg.canonical_json()))
    assert back.canonical_json() == cfg.canonical_json()
    assert back.digest() == cfg.digest()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"refine": {"nope": 1}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"scene": {"nope": 1}})


def test_version_checked():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"version": CONFIG_VERSION + 1})


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"seed": -1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"codecs": {"distance_min": 10, "distance_max": 5}})


def test_partial_sections_override_defaults():
    cfg = PipelineConfig.from_dict({"seed": 7, "scene": {"n_cars": [2, 3]}, "refine": {"render_passes": 1}})
    assert cfg.seed == 7 and cfg.scene.n_cars == (2, 3) and cfg.refine.render_passes == 1
    assert cfg.digest() != PipelineConfig().digest()


def test_substreams_are_stable_and_distinct():
    assert substream_seed(42, "scenes") == substream_seed(42, "scenes")
    assert substream_seed(42, "scenes") != substream_seed(42, "space")
    assert substream_seed(42, "scenes") != substream_seed(43, "scenes")


def test_manifest_has_no_timestamps_and_reloads(tmp_path):
    cfg = PipelineConfig().with_seed(5)
    m = manifest("stats", ["stats"], cfg, ["b", "a"])
    assert m["outputs"] == ["a", "b"] and m["seed"] == 5 and m["config_hash"] == cfg.digest()
    assert set(versions()) >= {"numpy", "scipy", "numba", "pillow", "artifact"}
    assert manifest("stats", ["stats"], cfg, ["a", "b"]) == m
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(m))
    assert load_config(path).digest() == cfg.digest()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
