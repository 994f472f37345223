"""Deterministic synthetic 5G network: CM snapshot files and PM series.

Throughput follows a closed-form law so that every later stage can be checked
against ground truth::

    T = C * (CQI/15)**1.2 * (1 - BLER) * PRB_util * (1 + eps)
    C = bandwidth_MHz * band_eff[band] * (1 + 0.15*[beamforming == on])
        * prod_j (1 + e_j * flag_j)

Configurations are drawn from a pool of ``n_config_templates`` templates so
that distinct cells share configuration states, which the known/unknown
evaluation protocol needs.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import special, stats

from .rng import StreamBank, derive_seed

ENV_COLUMNS = ("bler", "cqi", "data_volume", "prb_util", "active_ues")
KPI_COLUMN = "dl_throughput"
PM_COLUMNS = ("cell_id", "timestamp", *ENV_COLUMNS, KPI_COLUMN)

# path -> (domain, type tag). Order is the catalog order.
BASIC_PARAMS: dict[str, tuple[tuple, str]] = {
    "NRCELL/bandwidth_MHz": ((20, 40, 60, 80, 100), "numeric"),
    "NRCELL/band": (("n28", "n41", "n78"), "categorical"),
    "NRCELL/duplex": (("TDD", "FDD"), "categorical"),
    "NRCELL/beamforming": (("on", "off"), "categorical"),
    "NRCELL/frame_structure": (("DDDSU", "DDDDDDDSUU", "DSUUU"), "categorical"),
    "NRCELL/deployment": (("NSA", "SA"), "categorical"),
    "NRCELL/antenna_config": (("4T4R", "8T8R", "32T32R"), "categorical"),
    "NRCELL/tx_power_class": (("low", "mid", "high"), "categorical"),
    "HW/fronthaul_type": (("CPRI", "eCPRI"), "categorical"),
    "HW/radio_module": (("RM-A", "RM-B", "RM-C"), "categorical"),
    "HW/baseband_module": (("BB-1", "BB-2"), "categorical"),
    "SW/software_release": (("R22", "R23", "R24"), "categorical"),
}
BAND_EFF = {"n78": 1.0, "n41": 0.9, "n28": 0.7}
START = "2024-01-01T00:00:00Z"

_KEY_GLOBAL, _KEY_CELL, _KEY_PM = 0, 1, 2


def flag_path(j: int) -> str:
    return f"FEATURES/F{j:03d}"


def parse_time(value: str) -> datetime:
    return datetime.fromisoformat(value.replace("Z", "+00:00")).astimezone(timezone.utc)


def format_time(value: datetime) -> str:
    return value.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class SpecError(ValueError):
    """Invalid :class:`NetworkSpec`; ``fields`` lists the offending fields."""

    def __init__(self, problems: dict[str, str]):
        self.fields = sorted(problems)
        super().__init__("invalid network spec: " + "; ".join(f"{k}: {v}" for k, v in sorted(problems.items())))


@dataclass(frozen=True)
class NetworkSpec:
    n_cells: int = 200
    n_functionalities: int = 114
    horizon_days: int = 30
    pm_interval_minutes: int = 60
    cm_snapshot_interval_hours: int = 24
    change_prob_per_week: float = 0.5
    seed: int = 7
    active_effect_count: int = 10
    n_config_templates: int = 40
    noise_sigma: float = 0.05
    load_median: float = 3.0
    load_log_sigma: float = 1.0
    start: str = START

    def problems(self) -> dict[str, str]:
        bad = {}
        for name in ("n_cells", "n_functionalities", "horizon_days", "pm_interval_minutes",
                     "cm_snapshot_interval_hours", "active_effect_count", "n_config_templates"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) <= 0:
                bad[name] = "must be a positive integer"
        if "pm_interval_minutes" not in bad:
            if not 15 <= self.pm_interval_minutes <= 60:
                bad["pm_interval_minutes"] = "must lie in [15, 60]"
            elif "cm_snapshot_interval_hours" not in bad and (
                    self.cm_snapshot_interval_hours * 60) % self.pm_interval_minutes:
                bad["pm_interval_minutes"] = "must divide the CM snapshot interval"
        if not 0.0 <= self.change_prob_per_week <= 1.0:
            bad["change_prob_per_week"] = "must be a probability"
        if "active_effect_count" not in bad and "n_functionalities" not in bad \
                and self.active_effect_count > self.n_functionalities:
            bad["active_effect_count"] = "exceeds n_functionalities"
        if not self.noise_sigma >= 0:
            bad["noise_sigma"] = "must be >= 0"
        if not self.load_median > 0 or not self.load_log_sigma >= 0:
            bad["load_median"] = "load distribution must have positive median, nonnegative spread"
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            bad["seed"] = "must be an unsigned 64-bit integer"
        try:
            parse_time(self.start)
        except (TypeError, ValueError):
            bad["start"] = "must be an ISO-8601 UTC timestamp"
        return bad

    def validate(self) -> "NetworkSpec":
        bad = self.problems()
        if bad:
            raise SpecError(bad)
        return self

    @property
    def n_pm_rows(self) -> int:
        return self.horizon_days * 24 * 60 // self.pm_interval_minutes

    @property
    def horizon_minutes(self) -> int:
        return self.horizon_days * 24 * 60

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SpecError({k: "unknown field" for k in unknown})
        return cls(**data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class ScheduledChange:
    """A configuration change at ``minute`` (offset from the network start)."""

    minute: int
    edits: tuple[tuple[str, object], ...]


@dataclass
class CellProfile:
    cell_id: str
    index: int
    basic_params: dict[str, object]
    functionality_flags: np.ndarray
    latent_quality: float
    latent_load: float
    scheduled_changes: list[ScheduledChange] = field(default_factory=list)

    def config_at(self, minute: float) -> tuple[dict, np.ndarray]:
        """Configuration in force at ``minute``; changes apply from their own minute on."""
        params = dict(self.basic_params)
        flags = self.functionality_flags.copy()
        for change in self.scheduled_changes:
            if change.minute > minute:
                break
            for path, value in change.edits:
                if path.startswith("FEATURES/"):
                    flags[int(path[len("FEATURES/F"):])] = bool(value)
                else:
                    params[path] = value
        return params, flags

    def param_tree(self, minute: float) -> dict:
        params, flags = self.config_at(minute)
        tree: dict = {}
        for path, value in params.items():
            node, leaf = path.split("/")
            tree.setdefault(node, {})[leaf] = value
        tree["FEATURES"] = {f"F{j:03d}": bool(v) for j, v in enumerate(flags)}
        # Not in the selected manifest: present in real dumps, irrelevant to throughput.
        tree["OAM"] = {"admin_state": "unlocked", "mgmt_ip": f"10.{self.index // 256}.{self.index % 256}.1"}
        return tree


@dataclass(frozen=True)
class GroundTruthModel:
    functionality_effects: np.ndarray
    noise_sigma: float = 0.05
    band_eff: dict = field(default_factory=lambda: dict(BAND_EFF))

    def capacity(self, params: dict, flags: np.ndarray) -> float:
        c = float(params["NRCELL/bandwidth_MHz"]) * self.band_eff[params["NRCELL/band"]]
        if params["NRCELL/beamforming"] == "on":
            c *= 1.15
        return c * float(np.prod(1.0 + self.functionality_effects * np.asarray(flags, dtype=float)))


def ground_truth_throughput(params: dict, flags, cqi, bler, prb_util, model: GroundTruthModel, eps=0.0):
    """Throughput in Mbps for one configuration; env arguments may be arrays."""
    c = model.capacity(params, np.asarray(flags))
    t = c * (np.asarray(cqi, dtype=float) / 15.0) ** 1.2 * (1.0 - np.asarray(bler)) \
        * np.asarray(prb_util) * (1.0 + np.asarray(eps))
    return np.maximum(t, 0.0)


def selected_manifest(n_functionalities: int = 114) -> list[dict]:
    """Selected-parameter manifest: the basic catalog plus every functionality flag."""
    entries = [{"path": p, "type": t} for p, (_, t) in BASIC_PARAMS.items()]
    entries += [{"path": flag_path(j), "type": "flag"} for j in range(n_functionalities)]
    return entries


def _draw_config(rng: StreamBank, n_flags: int) -> tuple[dict, np.ndarray]:
    params = {}
    for path, (domain, _) in BASIC_PARAMS.items():
        params[path] = domain[int(rng.integers(0, len(domain))[0])]
    flags = rng.random(n_flags)[0] < 0.5
    return params, flags


def _draw_changes(rng: StreamBank, spec: NetworkSpec, params: dict) -> list[ScheduledChange]:
    """At most one change per week; a partial final week keeps the weekly hazard."""
    week = 7 * 24 * 60
    step = spec.pm_interval_minutes
    changes = []
    params = dict(params)
    start = 0
    while start < spec.horizon_minutes:
        length = min(week, spec.horizon_minutes - start)
        p = 1.0 - (1.0 - spec.change_prob_per_week) ** (length / week)
        u_event, u_time, u_kind = rng.random(3)[0]
        if u_event < p:
            minute = start + step * int(u_time * (length // step))
            minute = max(minute, step)
            if u_kind < 0.5:
                paths = list(BASIC_PARAMS)
                path = paths[int(rng.integers(0, len(paths))[0])]
                domain = BASIC_PARAMS[path][0]
                others = [v for v in domain if v != params[path]]
                value = others[int(rng.integers(0, len(others))[0])]
                params[path] = value
                edits = ((path, value),)
            else:
                k = 1 + int(rng.integers(0, 3)[0])
                pool = list(range(spec.n_functionalities))
                picked = []
                for _ in range(k):
                    picked.append(pool.pop(int(rng.integers(0, len(pool))[0])))
                edits = tuple((flag_path(j), None) for j in sorted(picked))  # toggles resolved below
            changes.append(ScheduledChange(minute, edits))
        start += length
    return changes


def _resolve_toggles(profile: CellProfile) -> None:
    resolved = []
    flags = profile.functionality_flags.copy()
    for change in profile.scheduled_changes:
        edits = []
        for path, value in change.edits:
            if path.startswith("FEATURES/"):
                j = int(path[len("FEATURES/F"):])
                flags[j] = not flags[j] if value is None else bool(value)
                edits.append((path, bool(flags[j])))
            else:
                edits.append((path, value))
        resolved.append(ScheduledChange(change.minute, tuple(edits)))
    profile.scheduled_changes = resolved


def generate_network(spec: NetworkSpec) -> tuple[list[CellProfile], GroundTruthModel]:
    """Cell profiles and the ground-truth model for ``spec``.

    Each cell draws from its own stream keyed by ``(seed, cell index)``, so a
    cell's profile does not depend on how many other cells are generated.
    """
    spec.validate()
    glob = StreamBank([derive_seed(spec.seed, _KEY_GLOBAL)])
    effects = np.zeros(spec.n_functionalities)
    effects[:spec.active_effect_count] = 0.02 + 0.08 * glob.random(spec.active_effect_count)[0]
    templates = [_draw_config(glob, spec.n_functionalities) for _ in range(spec.n_config_templates)]
    model = GroundTruthModel(functionality_effects=effects, noise_sigma=spec.noise_sigma)

    profiles = []
    for i in range(spec.n_cells):
        rng = StreamBank([derive_seed(spec.seed, _KEY_CELL, i)])
        t_idx = int(rng.integers(0, spec.n_config_templates)[0])
        params, flags = dict(templates[t_idx][0]), templates[t_idx][1].copy()
        u_q, z_load = rng.random(2)[0]
        quality = 5.0 + 8.0 * u_q
        load = spec.load_median * math.exp(spec.load_log_sigma * float(special.ndtri(z_load)))
        changes = _draw_changes(rng, spec, params)
        profile = CellProfile(f"cell_{i:04d}", i, params, flags, quality, load, changes)
        _resolve_toggles(profile)
        profiles.append(profile)
    return profiles, model


def diurnal_load(latent_load: float, hour) -> np.ndarray:
    return latent_load * np.maximum(0.1, 1.0 + 0.8 * np.sin(2 * np.pi * (np.asarray(hour) - 14.0) / 24.0))


def generate_pm_batch(profiles: list[CellProfile], model: GroundTruthModel, spec: NetworkSpec) -> pd.DataFrame:
    """PM rows for several cells, in (cell, time) order.

    Streams are per cell, so the result for a cell equals ``generate_pm`` on it alone.
    """
    if not profiles:
        return pd.DataFrame(columns=list(PM_COLUMNS))
    n = spec.n_pm_rows
    step = spec.pm_interval_minutes
    start = parse_time(spec.start)
    minutes = np.arange(n) * step
    hours = (start.hour + start.minute / 60.0 + minutes / 60.0) % 24.0
    interval_s = step * 60.0

    bank = StreamBank([derive_seed(spec.seed, _KEY_PM, p.index) for p in profiles])
    u = bank.random((n, 6))  # ue, cqi, bler, prb, eps, volume
    z = special.ndtri(u[..., 1:])

    frames = []
    stamps = [format_time(start + timedelta(minutes=int(m))) for m in minutes]
    for k, p in enumerate(profiles):
        lam = diurnal_load(p.latent_load, hours)
        ues = stats.poisson.ppf(u[k, :, 0], lam).astype(np.int64)
        cqi = np.clip(np.round(p.latent_quality + 1.2 * z[k, :, 0]), 1, 15)
        bler = np.clip(0.08 + 0.03 * z[k, :, 1], 0.0, 0.5)
        prb = np.clip(1.0 - np.exp(-ues / 8.0) + 0.02 * z[k, :, 2], 0.01, 0.99)
        eps = model.noise_sigma * z[k, :, 3]

        tput = np.empty(n)
        bounds = [0] + [int(np.searchsorted(minutes, c.minute)) for c in p.scheduled_changes] + [n]
        for a, b in zip(bounds[:-1], bounds[1:]):
            if b > a:
                params, flags = p.config_at(minutes[a])
                tput[a:b] = ground_truth_throughput(params, flags, cqi[a:b], bler[a:b], prb[a:b], model, eps[a:b])
        # MB transferred during the interval
        volume = np.maximum(tput * interval_s / 8.0 * (1.0 + 0.02 * z[k, :, 4]), 0.0)
        frames.append(pd.DataFrame({
            "cell_id": p.cell_id, "timestamp": stamps, "bler": bler, "cqi": cqi,
            "data_volume": volume, "prb_util": prb, "active_ues": ues, "dl_throughput": tput,
        }))
    return pd.concat(frames, ignore_index=True)


def generate_pm(profile: CellProfile, model: GroundTruthModel, spec: NetworkSpec) -> pd.DataFrame:
    return generate_pm_batch([profile], model, spec)


def snapshot_minutes(spec: NetworkSpec) -> list[int]:
    """Snapshot epochs, including one at the end of the horizon."""
    every = spec.cm_snapshot_interval_hours * 60
    return list(range(0, spec.horizon_minutes + 1, every))


def emit_cm_snapshots(profiles: list[CellProfile], spec: NetworkSpec, outdir) -> list[Path]:
    """Write one JSON file per snapshot epoch; returns the written paths."""
    outdir = Path(outdir)
    start = parse_time(spec.start)
    paths = []
    for minute in snapshot_minutes(spec):
        stamp = format_time(start + timedelta(minutes=minute))
        doc = {"timestamp": stamp,
               "cells": [{"cell_id": p.cell_id, "params": p.param_tree(minute)} for p in profiles]}
        path = outdir / f"cm_{stamp.replace('-', '').replace(':', '')}.json"
        try:
            path.write_text(json.dumps(doc, separators=(",", ":")))
        except OSError as exc:
            raise OSError(f"cannot write CM snapshot {path}: {exc}") from exc
        paths.append(path)
    return paths


def write_pm_csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    try:
        frame.to_csv(path, index=False, columns=list(PM_COLUMNS))
    except OSError as exc:
        raise OSError(f"cannot write PM file {path}: {exc}") from exc
    return path
