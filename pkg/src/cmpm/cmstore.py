"""CM snapshot parsing, snapshot diffs, configuration-state ids and stable periods."""

from __future__ import annotations

import hashlib
import json
import math
from collections import namedtuple
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping

from .datagen import parse_time

ABSENT = object()
PARAM_TYPES = ("categorical", "numeric", "flag")


class SnapshotParseError(ValueError):
    """Malformed JSON; ``offset`` is the byte offset of the failure."""

    def __init__(self, path, offset: int, msg: str):
        self.path, self.offset = str(path), offset
        super().__init__(f"{path}: malformed JSON at byte {offset}: {msg}")


class SnapshotSchemaError(ValueError):
    """Well-formed JSON that lacks a required field."""


class UsageError(ValueError):
    pass


ConfigChange = namedtuple("ConfigChange", ["path", "old", "new"])


@dataclass(frozen=True)
class ConfigSnapshot:
    cell_id: str
    timestamp: datetime
    tree: dict  # flat: slash-joined path -> scalar leaf


@dataclass(frozen=True)
class StablePeriod:
    cell_id: str
    state_id: str
    start: datetime
    end: datetime


@dataclass(frozen=True)
class UnstableInterval:
    """Open interval between two stable periods of one cell."""

    cell_id: str
    start: datetime
    end: datetime
    prev_state: str
    next_state: str


def flatten_tree(node: Mapping, prefix: str = "") -> dict:
    """Flatten a nested parameter tree to ``{"A/B/leaf": value}``."""
    flat = {}
    for key, value in node.items():
        path = f"{prefix}/{key}" if prefix else str(key)
        if isinstance(value, Mapping):
            flat.update(flatten_tree(value, path))
        elif isinstance(value, (str, int, float, bool)) or value is None:
            flat[path] = value
        else:
            raise SnapshotSchemaError(f"non-scalar leaf at {path!r}")
    return flat


def parse_snapshot_file(path) -> list[ConfigSnapshot]:
    path = Path(path)
    raw = path.read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        # exc.pos counts characters; convert to a byte offset
        offset = len(raw.decode("utf-8", errors="replace")[:exc.pos].encode("utf-8"))
        raise SnapshotParseError(path, offset, exc.msg) from exc
    if not isinstance(doc, dict):
        raise SnapshotSchemaError(f"{path}: top level must be an object")
    for name in ("timestamp", "cells"):
        if name not in doc:
            raise SnapshotSchemaError(f"{path}: missing required field {name!r}")
    stamp = parse_time(doc["timestamp"])
    snapshots = []
    for k, cell in enumerate(doc["cells"]):
        if "cell_id" not in cell:
            raise SnapshotSchemaError(f"{path}: cells[{k}] missing required field 'cell_id'")
        if "params" not in cell:
            raise SnapshotSchemaError(f"{path}: cell {cell['cell_id']!r} missing required field 'params'")
        snapshots.append(ConfigSnapshot(str(cell["cell_id"]), stamp, flatten_tree(cell["params"])))
    return snapshots


def load_snapshots(paths: Iterable) -> dict[str, list[ConfigSnapshot]]:
    """Parse many snapshot files into per-cell, time-sorted lists."""
    by_cell: dict[str, list[ConfigSnapshot]] = {}
    for p in sorted(Path(x) for x in paths):
        for snap in parse_snapshot_file(p):
            by_cell.setdefault(snap.cell_id, []).append(snap)
    for snaps in by_cell.values():
        snaps.sort(key=lambda s: s.timestamp)
    return dict(sorted(by_cell.items()))


def load_manifest(path) -> list[dict]:
    entries = json.loads(Path(path).read_text())
    for e in entries:
        if e.get("type") not in PARAM_TYPES:
            raise SnapshotSchemaError(f"manifest entry {e.get('path')!r}: type must be one of {PARAM_TYPES}")
    return entries


def render_value(value) -> str:
    """Canonical text for a leaf value, used by :func:`state_id`."""
    if value is ABSENT:
        return "\x00absent"
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "null"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isfinite(value) and value == int(value):
            return str(int(value))
        return repr(value)
    return str(value)


def state_id(tree: Mapping, selected: Iterable[str]) -> str:
    """128-bit configuration-state id as 32 hex digits.

    BLAKE2b (16-byte digest) over the UTF-8 bytes of ``path=value\\n`` lines
    for every selected path, sorted by path. Absent leaves render as
    ``\\x00absent``.
    """
    h = hashlib.blake2b(digest_size=16)
    for path in sorted(selected):
        h.update(f"{path}={render_value(tree.get(path, ABSENT))}\n".encode("utf-8"))
    return h.hexdigest()


def diff_snapshots(a: ConfigSnapshot, b: ConfigSnapshot, selected: Iterable[str]) -> list[ConfigChange]:
    """Changed selected leaves from ``a`` to ``b``, sorted by path; ``ABSENT`` marks a missing leaf."""
    if a.cell_id != b.cell_id:
        raise UsageError(f"cannot diff snapshots of different cells: {a.cell_id!r} vs {b.cell_id!r}")
    if not a.timestamp < b.timestamp:
        raise UsageError("snapshots must be given in increasing time order")
    changes = []
    for path in sorted(selected):
        old, new = a.tree.get(path, ABSENT), b.tree.get(path, ABSENT)
        if render_value(old) != render_value(new):
            changes.append(ConfigChange(path, old, new))
    return changes


def derive_stable_periods(snapshots: list[ConfigSnapshot], selected: Iterable[str]
                          ) -> tuple[list[StablePeriod], list[UnstableInterval]]:
    """Merge runs of equal-state consecutive snapshots into stable periods.

    A period spans its first to last snapshot; the open gap before the next
    period's first snapshot is unstable.
    """
    if not snapshots:
        raise UsageError("need at least one snapshot")
    for x, y in zip(snapshots, snapshots[1:]):
        if not x.timestamp < y.timestamp:
            raise UsageError(f"snapshots of {x.cell_id!r} not sorted by timestamp")
        if x.cell_id != y.cell_id:
            raise UsageError("snapshots from more than one cell")
    selected = sorted(selected)
    ids = [state_id(s.tree, selected) for s in snapshots]
    cell = snapshots[0].cell_id
    periods: list[StablePeriod] = []
    gaps: list[UnstableInterval] = []
    first = 0
    for k in range(1, len(snapshots) + 1):
        if k == len(snapshots) or ids[k] != ids[first]:
            periods.append(StablePeriod(cell, ids[first], snapshots[first].timestamp, snapshots[k - 1].timestamp))
            if k < len(snapshots):
                gaps.append(UnstableInterval(cell, snapshots[k - 1].timestamp, snapshots[k].timestamp,
                                             ids[first], ids[k]))
            first = k
    return periods, gaps


def state_params(snapshots: list[ConfigSnapshot], selected: Iterable[str]) -> dict[str, dict]:
    """Selected parameter values for every state id seen in ``snapshots``."""
    selected = sorted(selected)
    out = {}
    for s in snapshots:
        sid = state_id(s.tree, selected)
        if sid not in out:
            out[sid] = {p: s.tree.get(p) for p in selected}
    return out
