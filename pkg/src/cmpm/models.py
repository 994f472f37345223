"""Standardisation, OLS, a from-scratch ReLU MLP, the baseline grid and oversampling."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

CMPM_HIDDEN = (128, 128, 32)


class TrainingDiverged(FloatingPointError):
    """Loss became non-finite; message carries lr, epoch and batch."""


# ----------------------------------------------------------------- standardiser

@dataclass
class Standardizer:
    """Column-wise z-scoring with population standard deviation.

    Columns whose standard deviation is zero are excluded: ``apply`` returns
    only the ``kept`` columns and ``excluded`` lists the others.
    """

    mean: np.ndarray
    scale: np.ndarray
    kept: np.ndarray

    @classmethod
    def fit(cls, x) -> "Standardizer":
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if len(x) == 0:
            raise ValueError("cannot fit a standardizer on no rows")
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        kept = scale > 0
        for j in np.flatnonzero(~kept):
            log.info("standardizer: column %d has zero variance and is excluded", j)
        return cls(mean, scale, kept)

    @property
    def excluded(self) -> list[int]:
        return [int(j) for j in np.flatnonzero(~self.kept)]

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return (x - self.mean[0]) / self.scale[0] if self.kept[0] else np.zeros((len(x), 0))
        return (x[:, self.kept] - self.mean[self.kept]) / self.scale[self.kept]

    def invert(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return z * self.scale[0] + self.mean[0]
        return z * self.scale[self.kept] + self.mean[self.kept]


def fit_grouped(x, keys) -> dict:
    """One :class:`Standardizer` per distinct key."""
    x = np.asarray(x, dtype=float)
    keys = pd.Series(list(keys))
    return {k: Standardizer.fit(x[idx]) for k, idx in keys.groupby(keys, sort=True).indices.items()}


# ------------------------------------------------------------------------- OLS

@dataclass
class OlsModel:
    weights: np.ndarray
    intercept: float
    manifest_digest: str = ""

    def predict(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.weights + self.intercept


def ols_fit(x, y, manifest_digest: str = "") -> OlsModel:
    """Least squares with intercept; rank-deficient designs get the minimum-norm solution."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("ols_fit needs a non-empty 2-D design matrix")
    xm, ym = x.mean(axis=0), y.mean()
    w, *_ = np.linalg.lstsq(x - xm, y - ym, rcond=None)
    return OlsModel(w, float(ym - xm @ w), manifest_digest)


def ols_predict(model: OlsModel, x) -> np.ndarray:
    return model.predict(x)


# ------------------------------------------------------------------------- MLP

@dataclass
class TrainConfig:
    lr: float = 0.001
    schedule: str = "fixed"  # or "adaptive": halve lr after lr_patience epochs without improvement
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "sgd"  # or "adam"
    patience: int = 10  # early stop on validation loss
    lr_patience: int = 3
    min_lr: float = 1e-6
    weight_decay: float = 0.0  # decoupled, weights only

    def __post_init__(self):
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0 or self.patience <= 0 \
                or self.weight_decay < 0:
            raise ValueError("training hyperparameters must be positive")
        if self.schedule not in ("fixed", "adaptive") or self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown schedule/optimizer: {self.schedule}/{self.optimizer}")


@dataclass
class MlpModel:
    """Fully connected ReLU network with identity output."""

    dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    log: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, train, val)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(self.dims, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        list(self.log))

    def predict(self, x) -> np.ndarray:
        return mlp_forward(self, x)


def mlp_init(dims, seed: int = 0) -> MlpModel:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"bad layer sizes {dims}")
    rng = np.random.default_rng(seed)
    weights = [rng.normal(0.0, math.sqrt(2.0 / a), size=(a, b)) for a, b in zip(dims, dims[1:])]
    biases = [np.zeros(b) for b in dims[1:]]
    return MlpModel(dims, weights, biases)


def _forward(model: MlpModel, x: np.ndarray):
    acts = [x]
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = acts[-1] @ w + b
        acts.append(np.maximum(z, 0.0) if i < len(model.weights) - 1 else z)
    return acts


def mlp_forward(model: MlpModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return _forward(model, x)[-1][:, 0]


def mlp_gradients(model: MlpModel, x, y) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """MSE loss and its gradients with respect to every weight and bias."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    acts = _forward(model, x)
    err = acts[-1][:, 0] - y
    loss = float(np.mean(err * err))
    delta = (2.0 / len(y)) * err[:, None]
    gw, gb = [None] * len(model.weights), [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    return loss, gw, gb


def mse(model: MlpModel, x, y) -> float:
    e = mlp_forward(model, x) - np.asarray(y, dtype=float)
    return float(np.mean(e * e))


def mlp_train(model: MlpModel, x, y, cfg: TrainConfig, x_val=None, y_val=None) -> MlpModel:
    """Mini-batch training on MSE; returns a new model (the input is not modified).

    With validation data, the best-validation weights are kept, training stops
    after ``patience`` epochs without improvement, and the adaptive schedule
    halves the learning rate after ``lr_patience`` such epochs.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    model = model.copy()
    model.log = []
    rng = np.random.default_rng(cfg.seed)
    params = model.weights + model.biases
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    step = 0
    lr = cfg.lr
    has_val = x_val is not None and len(x_val) > 0
    best, best_loss, stale, lr_stale = None, np.inf, 0, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for bi, start in enumerate(range(0, len(x), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, gw, gb = mlp_gradients(model, x[idx], y[idx])
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss (lr={lr:g}, epoch={epoch}, batch={bi})")
            total += loss * len(idx)
            grads = gw + gb
            step += 1
            if cfg.weight_decay:
                for w in model.weights:
                    w *= 1.0 - lr * cfg.weight_decay
            for p, g, a, v in zip(params, grads, m1, m2):
                if cfg.optimizer == "adam":
                    a *= b1
                    a += (1 - b1) * g
                    v *= b2
                    v += (1 - b2) * g * g
                    p -= lr * (a / (1 - b1 ** step)) / (np.sqrt(v / (1 - b2 ** step)) + adam_eps)
                else:
                    p -= lr * g
        train_loss = total / len(x)
        val_loss = mse(model, x_val, y_val) if has_val else train_loss
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"non-finite validation loss (lr={lr:g}, epoch={epoch})")
        model.log.append((epoch, train_loss, val_loss))
        if val_loss < best_loss:
            best_loss, stale, lr_stale = val_loss, 0, 0
            best = ([w.copy() for w in model.weights], [b.copy() for b in model.biases])
        else:
            stale += 1
            lr_stale += 1
            if cfg.schedule == "adaptive" and lr_stale >= cfg.lr_patience:
                lr = max(lr / 2.0, cfg.min_lr)
                lr_stale = 0
            if has_val and stale >= cfg.patience:
                break
    if has_val and best is not None:
        for p, q in zip(model.weights + model.biases, best[0] + best[1]):
            p[...] = q
    return model


# ----------------------------------------------------------------- grid search

@dataclass(frozen=True)
class GridSpec:
    hidden: tuple[tuple[int, ...], ...] = ((30,), (50,), (100,), (30, 30))
    schedules: tuple[str, ...] = ("fixed", "adaptive")

    def cells(self):
        if not self.hidden or not self.schedules:
            raise ValueError("empty grid")
        return [(h, s) for h in self.hidden for s in self.schedules]


@dataclass
class GridResult:
    hidden: tuple[int, ...]
    config: TrainConfig
    model: MlpModel
    val_mse: float
    table: list[dict]


def grid_search(grid: GridSpec, x, y, x_val, y_val, base: TrainConfig = TrainConfig(),
                init=mlp_init) -> GridResult:
    """Train every grid cell and return the one with the lowest validation MSE.

    Ties go to fewer parameters, then the fixed schedule. Cells whose training
    diverges are logged and skipped.
    """
    cells = grid.cells()
    n_in = np.asarray(x).shape[1]
    table, best = [], None
    for hidden, schedule in cells:
        cfg = dataclasses.replace(base, schedule=schedule)
        model = init((n_in, *hidden, 1), base.seed)
        try:
            trained = mlp_train(model, x, y, cfg, x_val, y_val)
            score = mse(trained, x_val, y_val)
        except TrainingDiverged as exc:
            log.warning("grid cell %s/%s failed: %s", hidden, schedule, exc)
            table.append({"hidden": hidden, "schedule": schedule, "val_mse": None, "error": str(exc)})
            continue
        if not math.isfinite(score):
            table.append({"hidden": hidden, "schedule": schedule, "val_mse": None, "error": "non-finite"})
            continue
        table.append({"hidden": hidden, "schedule": schedule, "val_mse": score})
        key = (score, trained.n_params, schedule != "fixed")
        if best is None or key < best[0]:
            best = (key, GridResult(hidden, cfg, trained, score, table))
    if best is None:
        raise TrainingDiverged("every grid cell failed")
    return best[1]


# ----------------------------------------------------------------- oversampling

def oversample(frame: pd.DataFrame, column: str = "active_ues", threshold: float = 10,
               factor: int = 5, seed: int = 0) -> pd.DataFrame:
    """Repeat rows with ``column > threshold`` ``factor`` times in total, then shuffle.

    ``factor == 1`` (or no matching rows) returns the frame unchanged.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError("factor must be an integer >= 1")
    hit = frame[column].to_numpy() > threshold
    if factor == 1 or not hit.any():
        return frame
    extra = frame.loc[np.repeat(frame.index[hit], int(factor) - 1)]
    out = pd.concat([frame, extra], ignore_index=True)
    order = np.random.default_rng(seed).permutation(len(out))
    return out.iloc[order].reset_index(drop=True)


# ----------------------------------------------------------------- artifacts

ARTIFACT_VERSION = 1


def save_mlp(model: MlpModel, path, meta: dict | None = None) -> Path:
    """Write ``model`` and JSON metadata into one ``.npz``; reloading is bit-exact."""
    path = Path(path)
    arrays = {f"w{i}": w for i, w in enumerate(model.weights)}
    arrays.update({f"b{i}": b for i, b in enumerate(model.biases)})
    doc = {"version": ARTIFACT_VERSION, "dims": list(model.dims), "log": model.log, **(meta or {})}
    arrays["meta"] = np.frombuffer(json.dumps(doc, sort_keys=True).encode(), dtype=np.uint8)
    # np.savez stamps members with the wall clock; fixed stamps keep file digests reproducible
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    return path


def load_mlp(path) -> tuple[MlpModel, dict]:
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("version") != ARTIFACT_VERSION:
            raise ValueError(f"{path}: unsupported artifact version {meta.get('version')}")
        n = len(meta["dims"]) - 1
        model = MlpModel(tuple(meta["dims"]), [z[f"w{i}"] for i in range(n)], [z[f"b{i}"] for i in range(n)],
                         [tuple(r) for r in meta["log"]])
    return model, meta


# ------------------------------------------------------------------ CMPM model

# multiplicative factors of throughput; logged when ``log_transform`` is on
LOG_FEATURES = ("data_volume", "prb_util", "cqi", "NRCELL/bandwidth_MHz")


def _log_floor(x):
    return np.log(np.maximum(np.asarray(x, dtype=float), 0.0) + 1e-3)


class CmpmRegressor:
    """Single network over ``[environment | configuration]`` for every cell-state.

    Inputs and target are standardised globally on the training rows. With
    ``log_transform`` the target and the ``LOG_FEATURES`` inputs are logged
    first, which turns multiplicative effects into additive ones. Configuration
    columns that are constant on the training rows are dropped, and flags are
    re-pruned for correlation on the training rows only.
    """

    def __init__(self, hidden=CMPM_HIDDEN, cfg: TrainConfig | None = None, log_transform: bool = True,
                 corr_threshold: float = 0.95, val_fraction: float = 0.1):
        self.hidden = tuple(hidden)
        self.cfg = cfg or TrainConfig(optimizer="adam", lr=2e-3, batch_size=256, epochs=100, patience=10,
                                        schedule="adaptive", weight_decay=1.0)
        self.log_transform = log_transform
        self.corr_threshold = corr_threshold
        self.val_fraction = val_fraction
        self.env_columns: list[str] = []
        self.config_columns: list[str] = []
        self.x_std: Standardizer | None = None
        self.y_std: Standardizer | None = None
        self.mlp: MlpModel | None = None

    def _design(self, frame: pd.DataFrame) -> np.ndarray:
        x = frame[self.env_columns + self.config_columns].to_numpy(dtype=float).copy()
        if self.log_transform:
            for j, name in enumerate(self.env_columns + self.config_columns):
                if name in LOG_FEATURES:
                    x[:, j] = _log_floor(x[:, j])
        return x

    def _target(self, y):
        return _log_floor(y) if self.log_transform else np.asarray(y, dtype=float)

    def fit(self, frame: pd.DataFrame, feature_manifest: list[dict], env_columns, kpi_column: str
            ) -> "CmpmRegressor":
        from .pipeline import prune_correlated_features

        self.env_columns = list(env_columns)
        self.kpi_column = kpi_column
        names = [f["name"] for f in feature_manifest]
        varying = [c for c in names if frame[c].nunique() > 1]
        flags = [f["name"] for f in feature_manifest if f["encoding"] == "flag" and f["name"] in varying]
        kept_flags, self.pruned = prune_correlated_features(frame[flags], self.corr_threshold) if flags else ([], {})
        kept_flags = set(kept_flags)
        self.config_columns = [c for c in varying if c not in flags or c in kept_flags]

        x = self._design(frame)
        y = self._target(frame[kpi_column])
        self.x_std = Standardizer.fit(x)
        if not self.x_std.kept.all():
            raise ValueError("constant input column survived feature selection")
        # 0/1 indicators stay as they are: rare flags would otherwise get large inputs
        encoding = {f["name"]: f["encoding"] for f in feature_manifest}
        for j, name in enumerate(self.env_columns + self.config_columns):
            if encoding.get(name) in ("flag", "one_hot"):
                self.x_std.mean[j], self.x_std.scale[j] = 0.0, 1.0
        self.y_std = Standardizer.fit(y)
        xs, ys = self.x_std.apply(x), self.y_std.apply(y)
        rng = np.random.default_rng(self.cfg.seed)
        order = rng.permutation(len(xs))
        n_val = int(round(self.val_fraction * len(xs)))
        val, fit = np.sort(order[:n_val]), np.sort(order[n_val:])
        init = mlp_init((xs.shape[1], *self.hidden, 1), self.cfg.seed)
        self.mlp = mlp_train(init, xs[fit], ys[fit], self.cfg, xs[val], ys[val])
        return self

    def predict(self, frame: pd.DataFrame) -> np.ndarray:
        z = mlp_forward(self.mlp, self.x_std.apply(self._design(frame)))
        out = self.y_std.invert(z)
        return np.exp(out) - 1e-3 if self.log_transform else out

    def save(self, path, meta: dict | None = None) -> Path:
        doc = {
            "kind": "cmpm", "hidden": list(self.hidden), "train_config": dataclasses.asdict(self.cfg),
            "log_transform": self.log_transform, "corr_threshold": self.corr_threshold,
            "val_fraction": self.val_fraction, "env_columns": self.env_columns,
            "config_columns": self.config_columns, "kpi_column": self.kpi_column,
            "x_mean": self.x_std.mean.tolist(), "x_scale": self.x_std.scale.tolist(),
            "y_mean": self.y_std.mean.tolist(), "y_scale": self.y_std.scale.tolist(),
            **(meta or {}),
        }
        return save_mlp(self.mlp, path, doc)

    @classmethod
    def load(cls, path) -> "CmpmRegressor":
        mlp, meta = load_mlp(path)
        obj = cls(meta["hidden"], TrainConfig(**meta["train_config"]), meta["log_transform"],
                  meta["corr_threshold"], meta["val_fraction"])
        obj.env_columns, obj.config_columns = meta["env_columns"], meta["config_columns"]
        obj.kpi_column = meta["kpi_column"]
        xs = np.array(meta["x_scale"])
        obj.x_std = Standardizer(np.array(meta["x_mean"]), xs, xs > 0)
        ys = np.array(meta["y_scale"])
        obj.y_std = Standardizer(np.array(meta["y_mean"]), ys, ys > 0)
        obj.mlp = mlp
        obj.meta = meta
        return obj
