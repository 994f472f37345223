"""Known/unknown-configuration protocol, standardised MAE and report tables."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from . import models
from .datagen import ENV_COLUMNS, KPI_COLUMN
from .models import GridSpec, Standardizer, TrainConfig

log = logging.getLogger(__name__)

STATE_KEY = ["cell_id", "state_id", "ordinal"]
DEFAULT_BIN_EDGES = (0.0, 5.0, 10.0, 15.0, 20.0, math.inf)
MIN_STATE_ROWS = 10
TRAIN_FRACTION = 0.7


class SplitError(RuntimeError):
    pass


@dataclass
class SplitPlan:
    train_cells: list[str]
    test_cells: list[str]
    train_states: list[tuple]
    known_config: list[tuple]  # test cell-states whose state_id occurs in training
    unknown_config: list[tuple]
    boundaries: dict  # test cell-state -> number of rows in the 70% slice
    seed: int
    attempts: int = 1

    @property
    def test_states(self) -> list[tuple]:
        return sorted(self.known_config + self.unknown_config)

    def state_class(self, key) -> str:
        return "known" if key in set(self.known_config) else "unknown"

    def summary(self) -> dict:
        return {"train_cells": len(self.train_cells), "test_cells": len(self.test_cells),
                "train_cell_states": len(self.train_states), "known_config": len(self.known_config),
                "unknown_config": len(self.unknown_config),
                "known_state_ids": len({k[1] for k in self.known_config}),
                "unknown_state_ids": len({k[1] for k in self.unknown_config}),
                "seed": self.seed, "attempts": self.attempts}


def make_split(frame: pd.DataFrame, test_cell_fraction: float = 0.3, seed: int = 0,
               max_attempts: int = 20) -> SplitPlan:
    """Split whole cells into train/test and classify test cell-states.

    The 70% boundary of each test cell-state is temporal: its earliest rows.
    Reseeds (``seed + attempt``) while either test class is empty.
    """
    cells = sorted(frame["cell_id"].unique())
    if len(cells) < 2 or frame["state_id"].nunique() < 2:
        raise SplitError("need at least two cells and two configuration states")
    sizes = frame.groupby(STATE_KEY, sort=True).size()
    n_test = min(max(1, int(round(test_cell_fraction * len(cells)))), len(cells) - 1)
    for attempt in range(max_attempts):
        rng = np.random.default_rng(seed + attempt)
        test = set(np.asarray(cells)[rng.choice(len(cells), n_test, replace=False)].tolist())
        train_keys = [k for k in sizes.index if k[0] not in test]
        train_ids = {k[1] for k in train_keys}
        test_keys = [k for k in sizes.index if k[0] in test]
        known = [k for k in test_keys if k[1] in train_ids]
        unknown = [k for k in test_keys if k[1] not in train_ids]
        if known and unknown:
            bounds = {k: int(math.floor(TRAIN_FRACTION * sizes[k])) for k in test_keys}
            return SplitPlan(sorted(set(cells) - test), sorted(test), train_keys, known, unknown, bounds,
                             seed, attempt + 1)
    raise SplitError(f"no split with both known and unknown test configurations after {max_attempts} "
                     "attempts; increase n_cells or change_prob_per_week, or lower n_config_templates")


def mae_standardized(pred, target, standardizer: Standardizer) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    return float(np.mean(np.abs(standardizer.apply(pred) - standardizer.apply(target))))


def cdf(values) -> pd.DataFrame:
    """Empirical CDF: one step per distinct value."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("empty sample")
    uniq, counts = np.unique(v, return_counts=True)
    return pd.DataFrame({"value": uniq, "cum_prob": np.cumsum(counts) / v.size})


def spearman(x, y) -> float | None:
    """Rank correlation with average ranks for ties; ``None`` if either side has no rank variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) != len(y) or len(x) < 3:
        raise ValueError("need two equal-length samples of size >= 3")
    rx, ry = stats.rankdata(x), stats.rankdata(y)
    if rx.std() == 0 or ry.std() == 0:
        return None
    return float(np.corrcoef(rx, ry)[0, 1])


def correlation_study(frame: pd.DataFrame, min_rows: int = 30) -> pd.DataFrame:
    """Per-cell-state Spearman correlation of each environmental metric with throughput."""
    rows = []
    for key, g in frame.groupby(STATE_KEY, sort=True):
        if len(g) < min_rows:
            continue
        y = g[KPI_COLUMN].to_numpy(dtype=float)
        for metric in ENV_COLUMNS:
            rho = spearman(g[metric].to_numpy(dtype=float), y)
            if rho is not None:
                rows.append({"metric": metric, "cell_id": key[0], "state_id": key[1], "spearman_rho": rho})
    return pd.DataFrame(rows, columns=["metric", "cell_id", "state_id", "spearman_rho"])


def correlation_medians(corr: pd.DataFrame) -> dict[str, float]:
    """Median |rho| per metric."""
    return corr.assign(a=corr["spearman_rho"].abs()).groupby("metric")["a"].median().to_dict()


def bin_by_avg_ues(mae: pd.DataFrame, edges=DEFAULT_BIN_EDGES, model_columns=None) -> pd.DataFrame:
    """Cell-state counts and median MAE per model in ``[lo, hi)`` bins of average active UEs.

    Empty bins report a NaN median.
    """
    edges = list(edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must be strictly increasing")
    model_columns = model_columns or [c for c in mae.columns if c.startswith("mae_")]
    out = []
    for lo, hi in zip(edges, edges[1:]):
        sel = mae[(mae["avg_ues"] >= lo) & (mae["avg_ues"] < hi)]
        row = {"bin_lo": lo, "bin_hi": hi, "n_cellstates": len(sel)}
        for c in model_columns:
            vals = sel[c].dropna()
            row["median_" + c[len("mae_"):]] = float(vals.median()) if len(vals) else math.nan
        out.append(row)
    return pd.DataFrame(out)


# ------------------------------------------------------------------- protocol

@dataclass
class BaselineConfig:
    grid: GridSpec = GridSpec()
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=200, batch_size=32, patience=10))
    val_fraction: float = 0.2
    run_mlp: bool = True


def evaluate_cell_state(key, rows: pd.DataFrame, boundary: int, predictions: dict[str, np.ndarray],
                        cfg: BaselineConfig) -> dict:
    """MAE of every model on the 30% slice of one test cell-state.

    Baselines are trained on the 70% slice with environmental inputs only.
    ``predictions`` holds global-model predictions for every row of ``rows``.
    """
    env = rows[list(ENV_COLUMNS)].to_numpy(dtype=float)
    y = rows[KPI_COLUMN].to_numpy(dtype=float)
    fit_env, fit_y = env[:boundary], y[:boundary]
    kpi_std = Standardizer.fit(fit_y)
    note = ""
    if not kpi_std.kept[0]:
        # constant training KPI: any scale gives the same zero/nonzero verdict
        kpi_std = Standardizer(kpi_std.mean, np.ones(1), np.ones(1, dtype=bool))
        note = "constant KPI in training slice; unit scale used"
    env_std = Standardizer.fit(fit_env)
    zx = env_std.apply(env)
    zy = kpi_std.apply(y)
    result = {"cell_id": key[0], "state_id": key[1], "ordinal": key[2],
              "avg_ues": float(rows["active_ues"].mean()), "n_rows": len(rows), "note": note}
    for name, pred in predictions.items():
        result["mae_" + name] = mae_standardized(pred[boundary:], y[boundary:], kpi_std)

    ols = models.ols_fit(zx[:boundary], zy[:boundary])
    result["mae_ols"] = float(np.mean(np.abs(ols.predict(zx[boundary:]) - zy[boundary:])))
    if cfg.run_mlp:
        n_fit = max(1, int(round((1 - cfg.val_fraction) * boundary)))
        n_fit = min(n_fit, boundary - 1)
        best = models.grid_search(cfg.grid, zx[:n_fit], zy[:n_fit], zx[n_fit:boundary], zy[n_fit:boundary],
                                  cfg.train)
        result["mae_mlp"] = float(np.mean(np.abs(models.mlp_forward(best.model, zx[boundary:]) - zy[boundary:])))
        result["mlp_choice"] = f"{'x'.join(map(str, best.hidden))}/{best.config.schedule}"
    return result


def _evaluate_task(args):
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        return evaluate_cell_state(*args)


@dataclass
class EvalReport:
    mae: pd.DataFrame
    split: dict
    cdf: pd.DataFrame
    bins: pd.DataFrame
    corr: pd.DataFrame
    excluded: list = field(default_factory=list)

    def model_columns(self) -> list[str]:
        return [c for c in self.mae.columns if c.startswith("mae_")]

    def medians(self, cls: str | None = None) -> dict[str, float]:
        sel = self.mae if cls is None else self.mae[self.mae["class"] == cls]
        return {c[len("mae_"):]: float(sel[c].median()) for c in self.model_columns()}

    def write(self, outdir) -> dict[str, Path]:
        outdir = Path(outdir)
        cols = ["cell_id", "state_id", "ordinal", "class", "avg_ues", *self.model_columns()]
        paths = {
            "mae": outdir / "report_mae.csv", "cdf": outdir / "report_cdf.csv",
            "bins": outdir / "report_bins.csv", "corr": outdir / "report_corr.csv",
        }
        self.mae[cols].to_csv(paths["mae"], index=False)
        self.cdf.to_csv(paths["cdf"], index=False)
        self.bins.to_csv(paths["bins"], index=False, na_rep="absent")
        self.corr.to_csv(paths["corr"], index=False)
        return paths


def run_protocol(frame: pd.DataFrame, split: SplitPlan, global_models: dict, cfg: BaselineConfig = BaselineConfig(),
                 bin_edges=DEFAULT_BIN_EDGES, threads: int = 1) -> EvalReport:
    """Evaluate global models and per-cell-state baselines on every test cell-state.

    ``global_models`` maps a report name (``cmpm``, ``cmpm_os``) to an object
    with ``predict(frame) -> throughput``; those models must have been trained
    on train cells only.
    """
    groups = frame.groupby(STATE_KEY, sort=True).indices
    tasks, excluded = [], []
    for key in split.test_states:
        rows = frame.iloc[groups[key]]
        if len(rows) < MIN_STATE_ROWS:
            excluded.append({"cell_id": key[0], "state_id": key[1], "ordinal": key[2],
                             "reason": f"only {len(rows)} rows"})
            continue
        preds = {name: np.asarray(m.predict(rows), dtype=float) for name, m in global_models.items()}
        tasks.append((key, rows, split.boundaries[key], preds, cfg))
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_evaluate_task, tasks, chunksize=4))
    else:
        results = [_evaluate_task(t) for t in tasks]
    mae = pd.DataFrame(results)
    if not mae.empty:
        mae.insert(3, "class", [split.state_class((r.cell_id, r.state_id, r.ordinal)) for r in mae.itertuples()])
    model_cols = [c for c in mae.columns if c.startswith("mae_")]
    cdf_parts = []
    for c in model_cols:
        for cls in ("known", "unknown"):
            vals = mae.loc[mae["class"] == cls, c].dropna()
            if len(vals):
                cdf_parts.append(cdf(vals).assign(model=c[len("mae_"):], **{"class": cls}))
    cdf_table = (pd.concat(cdf_parts, ignore_index=True)[["model", "class", "value", "cum_prob"]]
                 if cdf_parts else pd.DataFrame(columns=["model", "class", "value", "cum_prob"]))
    split_meta = split.summary()
    split_meta.update({"evaluated": len(mae), "excluded": len(excluded),
                       "boundary": "earliest 70% of rows per cell-state (row count, not wall-clock)"})
    return EvalReport(mae, split_meta, cdf_table, bin_by_avg_ues(mae, bin_edges, model_cols),
                      correlation_study(frame), excluded)


class OracleModel:
    """Predicts the recorded throughput; a harness self-test."""

    def predict(self, frame: pd.DataFrame) -> np.ndarray:
        return frame[KPI_COLUMN].to_numpy(dtype=float)


class MeanModel:
    """Predicts a constant per row group; used to check the MAE closed form."""

    def __init__(self, value: float):
        self.value = value

    def predict(self, frame: pd.DataFrame) -> np.ndarray:
        return np.full(len(frame), self.value)
