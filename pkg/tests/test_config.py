import json

import pytest

from cmpm import config
from cmpm.config import ConfigError


def test_defaults_validate():
    cfg = config.load()
    assert cfg.network_spec().n_cells == 200 and cfg.threads == 1


def test_precedence_file_env_override(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 1, "threads": 2, "detector": {"penalty_multiplier": 2.0}}))
    cfg = config.load(p, {"detector.min_segment_len": 3}, environ={"CMPM_SEED": "5"})
    assert cfg.seed == 5 and cfg.threads == 2
    assert cfg.detector.penalty_multiplier == 2.0 and cfg.detector.min_segment_len == 3
    assert config.load(p, {"seed": 9}, environ={"CMPM_SEED": "5"}).seed == 9


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"sed": 1}))
    with pytest.raises(ConfigError, match="sed"):
        config.load(p)
    p.write_text(json.dumps({"model": {"hiden": [3]}}))
    with pytest.raises(ConfigError, match="model"):
        config.load(p)


@pytest.mark.parametrize("doc", [
    {"generator": {"n_cells": 0}},
    {"eval": {"test_cell_fraction": 1.5}},
    {"eval": {"bin_edges": [0, 5, 5]}},
    {"pipeline": {"correlation_threshold": 0}},
    {"model": {"train": {"lr": -1}}},
    {"threads": 0},
])
def test_invalid_values(tmp_path, doc):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        config.load(p)


def test_digest_ignores_workdir_and_threads():
    a = config.load(overrides={"workdir": "/x", "threads": 1})
    b = config.load(overrides={"workdir": "/y", "threads": 4})
    assert a.digest() == b.digest()
    assert a.digest() != config.load(overrides={"seed": 8}).digest()


def test_stage_seeds_differ_and_follow_top_seed():
    cfg = config.load()
    seeds = {cfg.stage_seed(s) for s in config.STAGE_KEYS}
    assert len(seeds) == len(config.STAGE_KEYS)
    assert config.load(overrides={"seed": 8}).stage_seed("split") != cfg.stage_seed("split")


def test_bin_edges_infinity_round_trip():
    assert config.load().bin_edges()[-1] == float("inf")
