import json
import shutil

import pandas as pd
import pytest

from cmpm import cli

SMALL = {"seed": 7,
         "generator": {"n_cells": 20, "horizon_days": 14, "n_config_templates": 3, "change_prob_per_week": 0.8},
         "model": {"hidden": [16, 8], "train": {"optimizer": "adam", "epochs": 3, "batch_size": 64},
                   "baseline_train": {"epochs": 3}, "oversample": True}}


def run(workdir, *args, cfg=SMALL):
    path = workdir / "cfg.json"
    path.write_text(json.dumps(cfg))
    return cli.main([args[0], "--config", str(path), "--workdir", str(workdir), *args[1:]])


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    wd = tmp_path_factory.mktemp("small")
    for cmd in ("gen", "build", "train", "eval", "report"):
        assert run(wd, cmd) == 0, cmd
    return wd


def test_minimal_gen_row_count(tmp_path, capsys):
    cfg = {"seed": 7, "generator": {"n_cells": 2, "horizon_days": 2}}
    assert run(tmp_path, "gen", cfg=cfg) == 0
    assert len(pd.read_csv(tmp_path / "pm.csv")) == 2 * 48
    assert len(list((tmp_path / "cm").glob("cm_*.json"))) == 3


def test_gen_rerun_has_identical_digests(tmp_path):
    cfg = {"seed": 7, "generator": {"n_cells": 3, "horizon_days": 3}}
    run(tmp_path, "gen", cfg=cfg)
    first = json.loads((tmp_path / "run_gen.json").read_text())
    run(tmp_path, "gen", cfg=cfg)
    second = json.loads((tmp_path / "run_gen.json").read_text())
    assert first["outputs"] == second["outputs"] and first["config_digest"] == second["config_digest"]


def test_missing_workdir_is_config_error(tmp_path, capsys):
    missing = tmp_path / "nope"
    code = cli.main(["gen", "--workdir", str(missing)])
    assert code == cli.EXIT_CONFIG and str(missing) in capsys.readouterr().err


def test_bad_config_value_is_config_error(tmp_path):
    assert run(tmp_path, "gen", cfg={"generator": {"n_cells": -1}}) == cli.EXIT_CONFIG


def test_eval_before_train_names_artifact(tmp_path, capsys):
    run(tmp_path, "gen")
    run(tmp_path, "build")
    assert run(tmp_path, "eval") == cli.EXIT_MISSING
    assert "cmpm.npz" in capsys.readouterr().err


def test_build_without_inputs_is_missing_artifact(tmp_path):
    assert run(tmp_path, "build") == cli.EXIT_MISSING


def test_cadence_mismatch_names_pm_ingestion(tmp_path, capsys):
    run(tmp_path, "gen")
    cfg = json.loads(json.dumps(SMALL))
    cfg["generator"]["pm_interval_minutes"] = 30
    assert run(tmp_path, "build", cfg=cfg) == cli.EXIT_PIPELINE
    assert "pmstore ingestion" in capsys.readouterr().err


def test_full_chain_outputs(built):
    for name in ("report_mae.csv", "report_cdf.csv", "report_bins.csv", "report_corr.csv", "summary.json"):
        assert (built / "reports" / name).exists()
    for cmd in ("gen", "build", "train", "eval"):
        doc = json.loads((built / f"run_{cmd}.json").read_text())
        assert doc["seed"] == 7 and doc["outputs"] and "tool_version" in doc
    mae = pd.read_csv(built / "reports" / "report_mae.csv")
    assert {"mae_cmpm", "mae_cmpm_os", "mae_ols", "mae_mlp"} <= set(mae.columns)


def test_training_rows_exclude_test_cells(built):
    from cmpm.models import load_mlp
    split = json.loads((built / "models" / "split.json").read_text())
    _, meta = load_mlp(built / "models" / "cmpm.npz")
    data = pd.read_csv(built / "dataset.csv")
    assert meta["train_rows"] == data.cell_id.isin(split["train_cells"]).sum()
    assert not set(split["train_cells"]) & set(split["test_cells"])


def test_oracle_flag_gives_zero_mae(built, tmp_path):
    wd = tmp_path / "copy"
    shutil.copytree(built, wd)
    assert run(wd, "eval", "--oracle") == 0
    mae = pd.read_csv(wd / "reports" / "report_mae.csv")
    assert (mae.mae_cmpm == 0).all()


def test_no_changepoints_never_adds_rows(built, tmp_path):
    wd = tmp_path / "nocp"
    wd.mkdir()
    for name in ("cm", "pm.csv", "selected_params.json"):
        src = built / name
        (shutil.copytree if src.is_dir() else shutil.copy)(src, wd / name)
    assert run(wd, "build", "--no-changepoints") == 0
    off = json.loads((wd / "manifest.json").read_text())["report"]
    on = json.loads((built / "manifest.json").read_text())["report"]
    assert len(pd.read_csv(wd / "dataset.csv")) <= len(pd.read_csv(built / "dataset.csv"))
    assert off["changepoint_gaps"] == 0 and on["unstable_intervals"] == off["unstable_intervals"]


def test_static_network_build_drops_nothing(tmp_path):
    cfg = {"seed": 3, "generator": {"n_cells": 4, "horizon_days": 3, "change_prob_per_week": 0.0}}
    run(tmp_path, "gen", cfg=cfg)
    assert run(tmp_path, "build", cfg=cfg) == 0
    rep = json.loads((tmp_path / "manifest.json").read_text())["report"]
    assert rep["unstable_intervals"] == 0 and rep["unstable_rows"] == 0
    assert len(pd.read_csv(tmp_path / "dataset.csv")) == 4 * 72


def test_train_threads_do_not_change_models(built, tmp_path):
    wd = tmp_path / "t2"
    shutil.copytree(built, wd)
    assert run(wd, "train", "--threads", "2") == 0
    for name in ("cmpm.npz", "cmpm_os.npz"):
        assert (wd / "models" / name).read_bytes() == (built / "models" / name).read_bytes()
