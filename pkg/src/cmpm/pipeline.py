"""From CM snapshots and PM series to the merged CMPM dataset.

Stages: stable periods -> (optional) change points in unstable gaps ->
segmentation into cell-states -> feature cleaning and encoding -> merge.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from . import cmstore, pmstore
from .datagen import ENV_COLUMNS, KPI_COLUMN, format_time
from .pmstore import ChangePointSet, PmSeries

log = logging.getLogger(__name__)

ID_COLUMNS = ("cell_id", "state_id", "ordinal", "timestamp")


class SegmentationError(RuntimeError):
    pass


class MergeError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class CellState:
    cell_id: str
    state_id: str
    ordinal: int


@dataclass(frozen=True)
class DetectorConfig:
    enabled: bool = True
    penalty_multiplier: float = 1.0
    min_segment_len: int = 2


# ------------------------------------------------------------------ segmentation

def _inner_rows(series: PmSeries, gap: cmstore.UnstableInterval) -> range:
    """Rows strictly inside the open interval ``gap``."""
    lo = int(np.floor(series.position(gap.start))) + 1
    hi = int(np.ceil(series.position(gap.end)))
    return range(max(lo, 0), min(hi, len(series)))


def detect_gap_changepoints(series: PmSeries, gap: cmstore.UnstableInterval,
                            cfg: DetectorConfig) -> ChangePointSet:
    """PELT on the throughput inside ``gap``, indices relative to the gap's first row.

    Runs on the longest stretch without masked rows.
    """
    rows = _inner_rows(series, gap)
    y = series.column(KPI_COLUMN)[rows.start:rows.stop]
    a, b = pmstore.longest_valid_run(series.mask[rows.start:rows.stop])
    run = y[a:b]
    m = cfg.min_segment_len
    if len(run) < max(3, 2 * m):
        return ChangePointSet((), len(rows), float("nan"))
    beta = pmstore.default_penalty(run, cfg.penalty_multiplier)
    found = pmstore.pelt_detect(run, beta, m)
    return ChangePointSet(tuple(a + i for i in found.indices), len(rows), beta, found.cost)


def segment(series: PmSeries, periods: list[cmstore.StablePeriod], gaps: list[cmstore.UnstableInterval],
            changepoints: dict[int, ChangePointSet] | None = None) -> list[tuple[CellState, range]]:
    """Assign PM rows to cell-states.

    Rows of a stable period belong to it. In the gap after period ``k``, rows
    before the earliest change point extend period ``k`` and rows from the
    latest change point on extend period ``k + 1``; everything else in the gap
    is dropped, as is the whole gap when it has no change point.
    ``changepoints`` maps gap index to indices relative to the gap's first row.
    """
    changepoints = changepoints or {}
    if len(gaps) != max(len(periods) - 1, 0):
        raise SegmentationError("expected exactly one unstable interval between consecutive periods")
    n = len(series)
    spans = []
    for p in periods:
        lo = max(int(np.ceil(series.position(p.start))), 0)
        hi = min(int(np.floor(series.position(p.end))) + 1, n)
        spans.append([lo, max(hi, lo)])
    for g, gap in enumerate(gaps):
        cps = changepoints.get(g)
        if cps is None or not cps.indices:
            continue
        rows = _inner_rows(series, gap)
        if any(not 0 < i < len(rows) for i in cps.indices):
            raise SegmentationError(f"{series.cell_id}: change point outside unstable interval {g} "
                                    f"(length {len(rows)}): {cps.indices}")
        if spans[g][1] == rows.start:
            spans[g][1] = rows.start + min(cps.indices)
        if spans[g + 1][0] == rows.stop:
            spans[g + 1][0] = rows.start + max(cps.indices)
    return [(CellState(series.cell_id, p.state_id, k), range(lo, hi))
            for k, (p, (lo, hi)) in enumerate(zip(periods, spans)) if hi > lo]


# ------------------------------------------------------------ feature cleaning

def prune_constant_features(frame: pd.DataFrame) -> list[str]:
    """Columns with at least two distinct values."""
    if frame.empty:
        raise ValueError("cannot prune features of an empty dataset")
    kept = [c for c in frame.columns if frame[c].nunique(dropna=False) >= 2]
    if not kept:
        log.warning("every configuration feature is constant; config feature set is empty")
    return kept


def prune_correlated_features(frame: pd.DataFrame, threshold: float = 0.95) -> tuple[list[str], dict[str, str]]:
    """Keep one feature per group of |Pearson| >= ``threshold`` correlated columns.

    Groups are connected components of the correlation graph; the kept
    representative is the lexicographically first name. Returns the kept
    columns (in input order) and a ``dropped -> kept`` report.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    names = list(frame.columns)
    if len(names) < 2:
        return names, {}
    x = frame.to_numpy(dtype=float)
    std = x.std(axis=0)
    if (std == 0).any():
        raise ValueError(f"zero-variance column reached correlation pruning: {names[int(np.argmin(std))]}")
    corr = np.corrcoef(x, rowvar=False)
    adj = np.abs(corr) >= threshold - 1e-12
    _, labels = connected_components(csr_matrix(adj), directed=False)
    keep_for = {}
    for name, lab in zip(names, labels):
        if lab not in keep_for or name < keep_for[lab]:
            keep_for[lab] = name
    kept = [nm for nm, lab in zip(names, labels) if keep_for[lab] == nm]
    report = {nm: keep_for[lab] for nm, lab in zip(names, labels) if keep_for[lab] != nm}
    return kept, report


def one_hot_encode(values, vocabulary: list[str]) -> tuple[np.ndarray, int]:
    """One column per vocabulary entry; values outside it encode as all zeros.

    Returns the matrix and the number of unseen values.
    """
    values = np.asarray([cmstore.render_value(v) for v in values], dtype=object)
    vocab = np.asarray(vocabulary, dtype=object)
    out = (values[:, None] == vocab[None, :]).astype(float)
    return out, int((out.sum(axis=1) == 0).sum())


@dataclass
class ConfigEncoder:
    """Fit-once encoder from selected parameters to the config feature vector."""

    manifest: list[dict]
    threshold: float = 0.95
    features: list[dict] = field(default_factory=list)
    report: dict = field(default_factory=dict)

    def _raw(self, params: pd.DataFrame) -> pd.DataFrame:
        cols = {}
        for e in self.manifest:
            col = params[e["path"]]
            if e["type"] == "flag":
                cols[e["path"]] = col.map(lambda v: 1.0 if v in (True, 1, "1", "true", "on") else 0.0)
            elif e["type"] == "numeric":
                cols[e["path"]] = col.astype(float)
            else:
                cols[e["path"]] = col.map(cmstore.render_value)
        return pd.DataFrame(cols, index=params.index)

    def fit(self, params: pd.DataFrame) -> "ConfigEncoder":
        """Fit on per-row parameter values (one row per dataset row)."""
        raw = self._raw(params)
        types = {e["path"]: e["type"] for e in self.manifest}
        non_constant = prune_constant_features(raw)
        constant = [c for c in raw.columns if c not in non_constant]
        flags = [c for c in non_constant if types[c] == "flag"]
        kept_flags, correlated = prune_correlated_features(raw[flags], self.threshold)
        kept_flags = set(kept_flags)
        self.features = []
        for path in non_constant:
            kind = types[path]
            if kind == "categorical":
                for cat in sorted(raw[path].unique()):
                    self.features.append({"name": f"{path}={cat}", "source": path,
                                          "encoding": "one_hot", "category": cat})
            elif kind == "numeric":
                self.features.append({"name": path, "source": path, "encoding": "numeric"})
            elif path in kept_flags:
                self.features.append({"name": path, "source": path, "encoding": "flag"})
        self.report = {"constant_dropped": constant, "correlated_dropped": correlated,
                       "threshold": self.threshold, "unseen_categories": 0}
        return self

    @property
    def names(self) -> list[str]:
        return [f["name"] for f in self.features]

    def transform(self, params: pd.DataFrame) -> np.ndarray:
        raw = self._raw(params)
        out = np.zeros((len(raw), len(self.features)))
        unseen = 0
        by_source: dict[str, list[int]] = {}
        for j, f in enumerate(self.features):
            by_source.setdefault(f["source"], []).append(j)
        for source, cols in by_source.items():
            first = self.features[cols[0]]
            if first["encoding"] == "one_hot":
                block, miss = one_hot_encode(raw[source], [self.features[j]["category"] for j in cols])
                out[:, cols] = block
                unseen += miss
            else:
                out[:, cols[0]] = raw[source].to_numpy(dtype=float)
        self.report["unseen_categories"] = self.report.get("unseen_categories", 0) + unseen
        return out


# ------------------------------------------------------------------- dataset

@dataclass
class CmpmDataset:
    frame: pd.DataFrame
    feature_manifest: list[dict]
    provenance: dict = field(default_factory=dict)
    report: dict = field(default_factory=dict)

    @property
    def config_columns(self) -> list[str]:
        return [f["name"] for f in self.feature_manifest]

    @property
    def env(self) -> np.ndarray:
        return self.frame[list(ENV_COLUMNS)].to_numpy(dtype=float)

    @property
    def config(self) -> np.ndarray:
        return self.frame[self.config_columns].to_numpy(dtype=float)

    @property
    def kpi(self) -> np.ndarray:
        return self.frame[KPI_COLUMN].to_numpy(dtype=float)

    def __len__(self) -> int:
        return len(self.frame)

    def cell_state_counts(self) -> pd.Series:
        return self.frame.groupby(["cell_id", "state_id", "ordinal"], sort=True).size()

    def save(self, outdir) -> tuple[Path, Path]:
        outdir = Path(outdir)
        csv_path, man_path = outdir / "dataset.csv", outdir / "manifest.json"
        self.frame.to_csv(csv_path, index=False)
        man_path.write_text(json.dumps({"features": self.feature_manifest, "report": self.report,
                                        "provenance": self.provenance}, indent=2, sort_keys=True))
        return csv_path, man_path

    @classmethod
    def load(cls, outdir) -> "CmpmDataset":
        outdir = Path(outdir)
        meta = json.loads((outdir / "manifest.json").read_text())
        frame = pd.read_csv(outdir / "dataset.csv", dtype={"cell_id": str, "state_id": str, "timestamp": str})
        return cls(frame, meta["features"], meta.get("provenance", {}), meta.get("report", {}))


def merge(series: dict[str, PmSeries], segments: list[tuple[CellState, range]],
          encodings: dict[str, np.ndarray], feature_manifest: list[dict]) -> CmpmDataset:
    """Join each segmented PM row with its configuration vector; masked rows are removed."""
    names = [f["name"] for f in feature_manifest]
    columns = [*ID_COLUMNS, *ENV_COLUMNS, *names, KPI_COLUMN]
    if not segments:
        log.warning("segmentation produced no rows; dataset is empty")
        return CmpmDataset(pd.DataFrame(columns=columns), feature_manifest, report={"masked_rows": 0})
    parts, masked = [], 0
    for state, rows in sorted(segments, key=lambda s: (s[0].cell_id, s[0].ordinal)):
        if state.state_id not in encodings:
            raise MergeError(f"no configuration encoding for state {state.state_id} of {state.cell_id}")
        s = series[state.cell_id]
        idx = np.arange(rows.start, rows.stop)
        good = idx[~s.mask[idx]]
        masked += len(idx) - len(good)
        if not len(good):
            continue
        block = pd.DataFrame(s.values[good][:, :len(ENV_COLUMNS)], columns=list(ENV_COLUMNS))
        block.insert(0, "timestamp", [format_time(s.timestamp(int(k))) for k in good])
        block.insert(0, "ordinal", state.ordinal)
        block.insert(0, "state_id", state.state_id)
        block.insert(0, "cell_id", state.cell_id)
        cfg = pd.DataFrame(np.broadcast_to(encodings[state.state_id], (len(good), len(names))), columns=names)
        block = pd.concat([block, cfg], axis=1)
        block[KPI_COLUMN] = s.values[good][:, len(ENV_COLUMNS)]
        parts.append(block)
    frame = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=columns)
    return CmpmDataset(frame[columns], feature_manifest, report={"masked_rows": masked})


@dataclass(frozen=True)
class BuildConfig:
    detector: DetectorConfig = DetectorConfig()
    correlation_threshold: float = 0.95


def build_dataset(snapshots: dict[str, list[cmstore.ConfigSnapshot]], series: dict[str, PmSeries],
                  manifest: list[dict], cfg: BuildConfig = BuildConfig()) -> CmpmDataset:
    """Run the full processing chain for every cell present in both inputs."""
    selected = [e["path"] for e in manifest]
    segments: list[tuple[CellState, range]] = []
    state_values: dict[str, dict] = {}
    stats = {"cells": 0, "stable_periods": 0, "unstable_intervals": 0, "changepoint_gaps": 0,
             "unstable_rows": 0}
    for cell in sorted(set(snapshots) & set(series)):
        snaps, s = snapshots[cell], series[cell]
        periods, gaps = cmstore.derive_stable_periods(snaps, selected)
        state_values.update(cmstore.state_params(snaps, selected))
        cps = {}
        if cfg.detector.enabled:
            for g, gap in enumerate(gaps):
                found = detect_gap_changepoints(s, gap, cfg.detector)
                if found.indices:
                    cps[g] = found
        segs = segment(s, periods, gaps, cps)
        segments.extend(segs)
        stats["cells"] += 1
        stats["stable_periods"] += len(periods)
        stats["unstable_intervals"] += len(gaps)
        stats["changepoint_gaps"] += len(cps)
        stats["unstable_rows"] += sum(len(_inner_rows(s, g)) for g in gaps)
    for cell in sorted(set(snapshots) ^ set(series)):
        log.warning("cell %s has only CM or only PM data; skipped", cell)

    # per-row parameter table for fitting the encoder, weighted by row counts
    states = sorted(state_values)
    params = pd.DataFrame([state_values[sid] for sid in states], index=states)
    weights = pd.Series(0, index=states)
    for state, rows in segments:
        weights[state.state_id] += len(rows)
    encoder = ConfigEncoder(manifest, cfg.correlation_threshold)
    if weights.sum() == 0:
        log.warning("no rows survived segmentation")
        return merge(series, [], {}, [])
    encoder.fit(params.loc[params.index.repeat(weights.to_numpy())])
    encodings = dict(zip(states, encoder.transform(params)))
    data = merge(series, segments, encodings, encoder.features)
    stats["segmented_rows"] = int(sum(len(r) for _, r in segments))
    data.report.update(stats)
    data.report["encoder"] = encoder.report
    data.report["changepoint_policy"] = "earliest/latest change point expands both neighbouring periods"
    return data
