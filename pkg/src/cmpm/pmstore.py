"""PM ingestion plus penalised change-point detection (PELT and an exact oracle)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np
import pandas as pd

from .datagen import ENV_COLUMNS, KPI_COLUMN, PM_COLUMNS, parse_time

SERIES_COLUMNS = (*ENV_COLUMNS, KPI_COLUMN)
VALID_RANGES = {
    "bler": (0.0, 1.0), "cqi": (1.0, 15.0), "data_volume": (0.0, np.inf),
    "prb_util": (0.0, 1.0), "active_ues": (0.0, np.inf), "dl_throughput": (0.0, np.inf),
}
BRUTE_FORCE_LIMIT = 512


class PmFormatError(ValueError):
    pass


class CadenceError(PmFormatError):
    pass


class OrderingError(PmFormatError):
    pass


@dataclass
class PmSeries:
    cell_id: str
    start: datetime
    interval_minutes: int
    values: np.ndarray  # (n, 6) in SERIES_COLUMNS order
    mask: np.ndarray  # True where the row is missing or invalid

    def __len__(self) -> int:
        return len(self.values)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, SERIES_COLUMNS.index(name)]

    def timestamp(self, k: int) -> datetime:
        return self.start + timedelta(minutes=k * self.interval_minutes)

    def position(self, when: datetime) -> float:
        """Fractional row index of ``when``."""
        return (when - self.start).total_seconds() / 60.0 / self.interval_minutes


def ingest_pm_csv(path, expected_interval: int) -> dict[str, PmSeries]:
    """Read a PM CSV into per-cell series on a shared, uniform time grid.

    The grid starts at the earliest timestamp in the file. Timesteps a cell
    lacks, and rows with NaN or out-of-range metrics, are flagged in ``mask``.
    """
    frame = pd.read_csv(path, dtype={"cell_id": str, "timestamp": str})
    missing = [c for c in PM_COLUMNS if c not in frame.columns]
    if missing:
        raise PmFormatError(f"{path}: missing columns {missing}")
    if frame.empty:
        return {}
    stamps = frame["timestamp"].map(parse_time)
    origin = stamps.min()
    step = timedelta(minutes=expected_interval)
    offsets = (stamps - origin) / step
    idx = np.floor(offsets.to_numpy(dtype=float)).astype(np.int64)
    off_grid = np.flatnonzero(offsets.to_numpy(dtype=float) != idx)
    if off_grid.size:
        r = off_grid[0]
        raise CadenceError(f"cell {frame['cell_id'].iat[r]!r}: timestamp {frame['timestamp'].iat[r]} "
                           f"is not on the {expected_interval}-minute grid starting {origin.isoformat()}")
    n = int(idx.max()) + 1
    values = frame[list(SERIES_COLUMNS)].to_numpy(dtype=float)

    groups = frame.groupby("cell_id", sort=True).indices
    steps = np.concatenate([np.diff(np.sort(idx[rows])) for rows in groups.values()])
    steps = steps[steps > 0]
    if steps.size and np.gcd.reduce(steps) > 1:
        raise CadenceError(f"{path}: observed cadence is {int(np.gcd.reduce(steps)) * expected_interval} minutes, "
                           f"expected {expected_interval}")
    series = {}
    for cell, rows in groups.items():
        k = idx[rows]
        bad = np.flatnonzero(np.diff(k) <= 0)
        if bad.size:
            raise OrderingError(f"cell {cell!r}: timestamp {frame['timestamp'].iat[rows[bad[0] + 1]]} "
                                "is duplicated or out of order")
        data = np.full((n, len(SERIES_COLUMNS)), np.nan)
        data[k] = values[rows]
        mask = ~np.isfinite(data).all(axis=1)
        for j, name in enumerate(SERIES_COLUMNS):
            lo, hi = VALID_RANGES[name]
            with np.errstate(invalid="ignore"):
                mask |= (data[:, j] < lo) | (data[:, j] > hi)
        series[cell] = PmSeries(cell, origin.to_pydatetime(), expected_interval, data, mask)
    return series


# ---------------------------------------------------------------- change points

@dataclass(frozen=True)
class ChangePointSet:
    """Segment starts ``indices`` for a length-``n`` series; ``cost`` is the
    optimal penalised objective (sum of segment costs + penalty * count)."""

    indices: tuple[int, ...]
    n: int
    penalty: float
    cost: float = field(default=math.nan, compare=False)

    def __len__(self) -> int:
        return len(self.indices)


def _prepare(y) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=float)
    if not np.isfinite(y).all():
        raise ValueError("series contains non-finite values")
    y = y - y.mean() if y.size else y
    s1 = np.concatenate(([0.0], np.cumsum(y)))
    s2 = np.concatenate(([0.0], np.cumsum(y * y)))
    return s1, s2


def _segment_cost(s1, s2, a, b):
    """L2 cost of ``y[a:b]`` for an array of starts ``a`` and one end ``b``."""
    d = s1[b] - s1[a]
    return (s2[b] - s2[a]) - d * d / (b - a)


def segment_cost(y, a: int, b: int) -> float:
    s1, s2 = _prepare(y)
    return float(_segment_cost(s1, s2, np.array([a]), b)[0])


def objective(y, indices, penalty: float) -> float:
    s1, s2 = _prepare(y)
    bounds = [0, *indices, len(s1) - 1]
    return float(sum(_segment_cost(s1, s2, np.array([a]), b)[0] for a, b in zip(bounds, bounds[1:]))
                 + penalty * len(indices))


def _backtrack(last: np.ndarray, n: int) -> tuple[int, ...]:
    cps = []
    t = n
    while last[t] > 0:
        t = int(last[t])
        cps.append(t)
    return tuple(reversed(cps))


def _pick(partial: np.ndarray) -> int:
    """Index of the minimum; near-ties go to the earliest candidate so rounding cannot flip the choice."""
    best = partial.min()
    return int(np.flatnonzero(partial <= best + 1e-10 * (1.0 + abs(best)))[0])


def pelt_detect(y, penalty: float, min_segment_len: int = 2) -> ChangePointSet:
    """Optimal L2 change points under a linear penalty, with PELT pruning.

    A candidate ``s`` that fails ``F(s) + C(s, t) <= F(t)`` is dropped, but only
    once ``t`` itself becomes an admissible last change point (``t + m``), so
    the result stays exact with a minimum segment length ``m``.
    """
    if not penalty > 0:
        raise ValueError("penalty must be positive")
    m = max(1, int(min_segment_len))
    s1, s2 = _prepare(y)
    n = len(s1) - 1
    if n < 2 * m:
        cost = float(_segment_cost(s1, s2, np.array([0]), n)[0]) if n else 0.0
        return ChangePointSet((), n, penalty, cost)

    F = np.full(n + 1, np.inf)
    F[0] = -penalty
    last = np.zeros(n + 1, dtype=np.int64)
    candidates = np.array([0], dtype=np.int64)
    expires = np.array([n + 1], dtype=np.int64)
    for t in range(m, n + 1):
        if t - m >= m:
            candidates = np.append(candidates, t - m)
            expires = np.append(expires, n + 1)
        live = expires > t
        candidates, expires = candidates[live], expires[live]
        partial = F[candidates] + _segment_cost(s1, s2, candidates, t)
        i = _pick(partial)
        F[t] = partial[i] + penalty
        last[t] = candidates[i]
        # tolerance only delays pruning, which never changes the optimum
        stale = partial > F[t] + 1e-9 * (1.0 + abs(F[t]))
        expires = np.where(stale, np.minimum(expires, t + m), expires)
    return ChangePointSet(_backtrack(last, n), n, penalty, float(F[n]))


def brute_force_segment(y, penalty: float, min_segment_len: int = 2) -> ChangePointSet:
    """Unpruned optimal-partitioning DP over the same objective as :func:`pelt_detect`."""
    s1, s2 = _prepare(y)
    n = len(s1) - 1
    if n > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force limited to n <= {BRUTE_FORCE_LIMIT}, got {n}")
    if not penalty > 0:
        raise ValueError("penalty must be positive")
    m = max(1, int(min_segment_len))
    if n < 2 * m:
        cost = float(_segment_cost(s1, s2, np.array([0]), n)[0]) if n else 0.0
        return ChangePointSet((), n, penalty, cost)
    F = np.full(n + 1, np.inf)
    F[0] = -penalty
    last = np.zeros(n + 1, dtype=np.int64)
    for t in range(m, n + 1):
        cands = np.concatenate(([0], np.arange(m, t - m + 1)))
        partial = F[cands] + _segment_cost(s1, s2, cands, t)
        i = _pick(partial)
        F[t] = partial[i] + penalty
        last[t] = cands[i]
    return ChangePointSet(_backtrack(last, n), n, penalty, float(F[n]))


def robust_sigma(y) -> float:
    """Noise scale from the MAD of first differences."""
    d = np.diff(np.asarray(y, dtype=float))
    mad = np.median(np.abs(d - np.median(d)))
    return float(mad / (0.6745 * math.sqrt(2.0)))


def default_penalty(y, multiplier: float = 1.0) -> float:
    """``multiplier * sigma**2 * ln(n)``.

    For a series with no detectable noise the penalty falls back to
    ``1e-8 * max(1, mean(y**2))``, enough to stop rounding residue in the
    segment costs from producing change points.
    """
    y = np.asarray(y, dtype=float)
    if y.size < 3:
        raise ValueError("need at least 3 samples")
    beta = multiplier * robust_sigma(y) ** 2 * math.log(y.size)
    floor = 1e-8 * max(1.0, float(np.mean(y * y)))
    return max(beta, floor)


def longest_valid_run(mask: np.ndarray) -> tuple[int, int]:
    """``(start, stop)`` of the longest run of ``False`` in ``mask``."""
    best, start = (0, 0), None
    for k, bad in enumerate(np.append(mask, True)):
        if not bad and start is None:
            start = k
        elif bad and start is not None:
            if k - start > best[1] - best[0]:
                best = (start, k)
            start = None
    return best
