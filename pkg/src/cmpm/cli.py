"""Command line: ``gen``, ``build``, ``train``, ``eval``, ``report``.

Exit codes: 0 success, 2 configuration error, 3 pipeline error, 4 missing
artifact. Every command writes ``run_<command>.json`` with config, input and
output digests into the workdir.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import pandas as pd
from threadpoolctl import threadpool_limits

from . import __version__, cmstore, config, datagen, evaluation, models, pipeline, pmstore
from .datagen import ENV_COLUMNS, KPI_COLUMN

log = logging.getLogger("cmpm")

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_MISSING = 0, 2, 3, 4


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


class _KeyValueFormatter(logging.Formatter):
    def format(self, record):
        doc = {"ts": round(record.created, 3), "level": record.levelname, "logger": record.name,
               "msg": record.getMessage()}
        return json.dumps(doc)


# ------------------------------------------------------------------ helpers

def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def digests(workdir: Path, paths) -> dict[str, str]:
    return {str(Path(p).relative_to(workdir)): sha256(Path(p)) for p in sorted(paths)}


class Layout:
    def __init__(self, workdir: Path):
        self.root = workdir
        self.cm = workdir / "cm"
        self.pm = workdir / "pm.csv"
        self.selected = workdir / "selected_params.json"
        self.generator = workdir / "generator.json"
        self.dataset = workdir / "dataset.csv"
        self.manifest = workdir / "manifest.json"
        self.models = workdir / "models"
        self.split = workdir / "models" / "split.json"
        self.reports = workdir / "reports"

    def cm_files(self):
        return sorted(self.cm.glob("cm_*.json"))

    def require(self, *paths: Path) -> None:
        for p in paths:
            if not p.exists():
                raise CommandError(EXIT_MISSING, f"missing artifact: {p}")


def _write_run(layout: Layout, cfg: config.ExperimentConfig, command: str, inputs, outputs, timings) -> Path:
    doc = {
        "command": command, "tool_version": __version__, "config_digest": cfg.digest(), "seed": cfg.seed,
        "threads": cfg.threads, "inputs": digests(layout.root, inputs), "outputs": digests(layout.root, outputs),
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
    }
    path = layout.root / f"run_{command}.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


# ------------------------------------------------------------------ commands

def cmd_gen(cfg: config.ExperimentConfig) -> dict:
    layout = Layout(Path(cfg.workdir))
    spec = cfg.network_spec()
    t0 = time.perf_counter()
    profiles, truth = datagen.generate_network(spec)
    layout.cm.mkdir(exist_ok=True)
    for stale in layout.cm_files():
        stale.unlink()
    cm_paths = datagen.emit_cm_snapshots(profiles, spec, layout.cm)
    pm = datagen.generate_pm_batch(profiles, truth, spec)
    datagen.write_pm_csv(pm, layout.pm)
    layout.selected.write_text(json.dumps(datagen.selected_manifest(spec.n_functionalities), indent=1))
    layout.generator.write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    outputs = [*cm_paths, layout.pm, layout.selected, layout.generator]
    _write_run(layout, cfg, "gen", [], outputs, {"gen": time.perf_counter() - t0})
    log.info("gen: %d cells, %d snapshots, %d PM rows", spec.n_cells, len(cm_paths), len(pm))
    return {"cells": spec.n_cells, "snapshots": len(cm_paths), "pm_rows": len(pm)}


def cmd_build(cfg: config.ExperimentConfig) -> dict:
    layout = Layout(Path(cfg.workdir))
    manifest_path = Path(cfg.pipeline.manifest) if cfg.pipeline.manifest else layout.selected
    layout.require(layout.pm, manifest_path, layout.cm)
    cm_files = layout.cm_files()
    if not cm_files:
        raise CommandError(EXIT_MISSING, f"missing artifact: no CM snapshots in {layout.cm}")
    spec = cfg.network_spec()
    timings = {}
    stage = "cmstore parsing"
    try:
        t0 = time.perf_counter()
        snapshots = cmstore.load_snapshots(cm_files)
        manifest = cmstore.load_manifest(manifest_path)
        timings["cm"] = time.perf_counter() - t0
        stage = "pmstore ingestion"
        t0 = time.perf_counter()
        series = pmstore.ingest_pm_csv(layout.pm, spec.pm_interval_minutes)
        timings["pm"] = time.perf_counter() - t0
        stage = "segmentation/cleaning/encoding/merge"
        t0 = time.perf_counter()
        det = pipeline.DetectorConfig(cfg.detector.enable_changepoint_expansion, cfg.detector.penalty_multiplier,
                                      cfg.detector.min_segment_len)
        data = pipeline.build_dataset(snapshots, series, manifest,
                                      pipeline.BuildConfig(det, cfg.pipeline.correlation_threshold))
        timings["pipeline"] = time.perf_counter() - t0
    except (ValueError, RuntimeError, KeyError) as exc:
        raise CommandError(EXIT_PIPELINE, f"build failed in {stage}: {exc}") from exc
    data.provenance = {"generator_seed": spec.seed, "config_digest": cfg.digest()}
    outputs = data.save(layout.root)
    inputs = [*cm_files, layout.pm, manifest_path]
    _write_run(layout, cfg, "build", inputs, outputs, timings)
    log.info("build: %d rows, %d config features", len(data), len(data.feature_manifest))
    return {"rows": len(data), "features": len(data.feature_manifest), **{
        k: v for k, v in data.report.items() if isinstance(v, int)}}


def _train_one(args):
    frame, features, cfg_dict, path = args
    with threadpool_limits(1):
        mcfg = models.TrainConfig(**cfg_dict["train"])
        reg = models.CmpmRegressor(cfg_dict["hidden"], mcfg, cfg_dict["log_transform"], cfg_dict["threshold"])
        reg.fit(frame, features, ENV_COLUMNS, KPI_COLUMN)
        reg.save(path, {"train_rows": len(frame)})
    return str(path)


def cmd_train(cfg: config.ExperimentConfig) -> dict:
    layout = Layout(Path(cfg.workdir))
    layout.require(layout.dataset, layout.manifest)
    data = pipeline.CmpmDataset.load(layout.root)
    try:
        split = evaluation.make_split(data.frame, cfg.eval.test_cell_fraction, cfg.stage_seed("split"))
    except evaluation.SplitError as exc:
        raise CommandError(EXIT_PIPELINE, f"train failed in split: {exc}") from exc
    layout.models.mkdir(exist_ok=True)
    layout.split.write_text(json.dumps({
        "train_cells": split.train_cells, "test_cells": split.test_cells, "seed": split.seed,
        "attempts": split.attempts, "summary": split.summary()}, indent=1))
    train = data.frame[data.frame["cell_id"].isin(split.train_cells)].reset_index(drop=True)
    spec = {"train": {**cfg.model.train, "seed": cfg.stage_seed("train")}, "hidden": cfg.model.hidden,
            "log_transform": cfg.model.log_transform, "threshold": cfg.pipeline.correlation_threshold}
    jobs = [(train, data.feature_manifest, spec, layout.models / "cmpm.npz")]
    if cfg.model.oversample:
        boosted = models.oversample(train, "active_ues", cfg.model.oversample_threshold,
                                    cfg.model.oversample_factor, cfg.stage_seed("oversample"))
        jobs.append((boosted, data.feature_manifest, spec, layout.models / "cmpm_os.npz"))
    t0 = time.perf_counter()
    try:
        if cfg.threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(cfg.threads, len(jobs))) as pool:
                paths = list(pool.map(_train_one, jobs))
        else:
            paths = [_train_one(j) for j in jobs]
    except models.TrainingDiverged as exc:
        raise CommandError(EXIT_PIPELINE, f"train failed: {exc}") from exc
    outputs = [Path(p) for p in paths] + [layout.split]
    _write_run(layout, cfg, "train", [layout.dataset, layout.manifest], outputs,
               {"train": time.perf_counter() - t0})
    log.info("train: %s", ", ".join(Path(p).name for p in paths))
    return {"models": [Path(p).name for p in paths], "train_rows": len(train), **split.summary()}


def _load_split(layout: Layout, frame: pd.DataFrame, cfg: config.ExperimentConfig) -> evaluation.SplitPlan:
    """Recompute the split recorded by ``train`` and check it still matches."""
    doc = json.loads(layout.split.read_text())
    split = evaluation.make_split(frame, cfg.eval.test_cell_fraction, doc["seed"])
    if split.test_cells != doc["test_cells"]:
        raise CommandError(EXIT_PIPELINE, "stored split does not match the dataset; rerun train")
    return split


def cmd_eval(cfg: config.ExperimentConfig, oracle: bool = False) -> dict:
    layout = Layout(Path(cfg.workdir))
    layout.require(layout.dataset, layout.manifest)
    data = pipeline.CmpmDataset.load(layout.root)
    global_models: dict = {}
    if oracle:
        global_models["cmpm"] = evaluation.OracleModel()
        split = evaluation.make_split(data.frame, cfg.eval.test_cell_fraction, cfg.stage_seed("split"))
    else:
        layout.require(layout.models / "cmpm.npz", layout.split)
        split = _load_split(layout, data.frame, cfg)
        global_models["cmpm"] = models.CmpmRegressor.load(layout.models / "cmpm.npz")
        if (layout.models / "cmpm_os.npz").exists():
            global_models["cmpm_os"] = models.CmpmRegressor.load(layout.models / "cmpm_os.npz")
    base = evaluation.BaselineConfig(train=cfg.baseline_config(), run_mlp=cfg.model.grid)
    t0 = time.perf_counter()
    with threadpool_limits(1):
        report = evaluation.run_protocol(data.frame, split, global_models, base, cfg.bin_edges(), cfg.threads)
    layout.reports.mkdir(exist_ok=True)
    paths = report.write(layout.reports)
    summary_path = layout.reports / "split.json"
    summary_path.write_text(json.dumps({"split": report.split, "excluded": report.excluded}, indent=1,
                                       sort_keys=True))
    inputs = [layout.dataset, layout.manifest, *sorted(layout.models.glob("*.npz"))]
    _write_run(layout, cfg, "eval", inputs, [*paths.values(), summary_path], {"eval": time.perf_counter() - t0})
    log.info("eval: %d cell-states evaluated, %d excluded", len(report.mae), len(report.excluded))
    return {"evaluated": len(report.mae), "medians": report.medians()}


def summarize(reports_dir: Path) -> dict:
    """Headline numbers from the report CSVs."""
    mae = pd.read_csv(reports_dir / "report_mae.csv")
    corr = pd.read_csv(reports_dir / "report_corr.csv")
    bins = pd.read_csv(reports_dir / "report_bins.csv", na_values=["absent"])
    cols = [c for c in mae.columns if c.startswith("mae_")]
    out = {"median_mae": {c[4:]: float(mae[c].median()) for c in cols},
           "median_mae_by_class": {cls: {c[4:]: float(g[c].median()) for c in cols}
                                   for cls, g in mae.groupby("class")},
           "cellstates_by_class": mae["class"].value_counts().sort_index().to_dict(),
           "median_abs_spearman": evaluation.correlation_medians(corr),
           "bins": bins.astype(object).where(bins.notna(), None).to_dict(orient="records")}
    return out


def cmd_report(cfg: config.ExperimentConfig) -> dict:
    layout = Layout(Path(cfg.workdir))
    layout.require(layout.reports / "report_mae.csv", layout.reports / "report_corr.csv",
                   layout.reports / "report_bins.csv")
    summary = summarize(layout.reports)
    path = layout.reports / "summary.json"
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=str))
    return summary


# --------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmpm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen", "build", "train", "eval", "report"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--workdir")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--no-changepoints", action="store_true", help="disable change-point expansion")
        p.add_argument("--oversample", action="store_true", help="also train the oversampled model")
        if name == "eval":
            p.add_argument("--oracle", action="store_true", help="replace CMPM by a perfect predictor")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KeyValueFormatter())
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, handlers=[handler], force=True)
    overrides = {"workdir": args.workdir, "seed": args.seed, "threads": args.threads}
    if args.no_changepoints:
        overrides["detector.enable_changepoint_expansion"] = False
    if args.oversample:
        overrides["model.oversample"] = True
    try:
        cfg = config.load(args.config, overrides)
        workdir = Path(cfg.workdir)
        if not workdir.is_dir():
            raise config.ConfigError(f"workdir does not exist: {workdir}")
        if args.command == "gen":
            result = cmd_gen(cfg)
        elif args.command == "build":
            result = cmd_build(cfg)
        elif args.command == "train":
            result = cmd_train(cfg)
        elif args.command == "eval":
            result = cmd_eval(cfg, oracle=args.oracle)
        else:
            result = cmd_report(cfg)
    except config.ConfigError as exc:
        log.error("config error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
