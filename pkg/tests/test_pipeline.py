from datetime import datetime, timedelta, timezone

import numpy as np
import pandas as pd
import pytest

from cmpm import cmstore, pipeline, pmstore
from cmpm.cmstore import StablePeriod, UnstableInterval
from cmpm.datagen import (ENV_COLUMNS, KPI_COLUMN, NetworkSpec, generate_network, generate_pm_batch, parse_time,
                          selected_manifest, snapshot_minutes)
from cmpm.pipeline import CellState, prune_constant_features, prune_correlated_features, segment
from cmpm.pmstore import ChangePointSet, PmSeries

T0 = datetime(2024, 1, 1, tzinfo=timezone.utc)


def hours(h):
    return T0 + timedelta(hours=h)


def series(n=51, cell="c"):
    values = np.tile([0.1, 9, 100.0, 0.5, 3, 10.0], (n, 1))
    return PmSeries(cell, T0, 60, values, np.zeros(n, bool))


def fig4_layout():
    """A:[0,10] gap B:[20,30] gap C D:[40,50], hourly rows 0..50."""
    periods = [StablePeriod("c", "A", hours(0), hours(10)), StablePeriod("c", "B", hours(20), hours(30)),
               StablePeriod("c", "D", hours(40), hours(50))]
    gaps = [UnstableInterval("c", hours(10), hours(20), "A", "B"),
            UnstableInterval("c", hours(30), hours(40), "B", "D")]
    return periods, gaps


def as_ranges(segs):
    return {(s.state_id, s.ordinal): (r.start, r.stop) for s, r in segs}


def test_fig4_changepoint_extends_both_neighbours():
    periods, gaps = fig4_layout()
    # gap C holds rows 31..39; a change point 4 rows in splits it at row 35
    segs = segment(series(), periods, gaps, {1: ChangePointSet((4,), 9, 1.0)})
    assert as_ranges(segs) == {("A", 0): (0, 11), ("B", 1): (20, 35), ("D", 2): (35, 51)}


def test_gap_without_changepoint_is_dropped():
    periods, gaps = fig4_layout()
    got = as_ranges(segment(series(), periods, gaps, {}))
    assert got == {("A", 0): (0, 11), ("B", 1): (20, 31), ("D", 2): (40, 51)}
    covered = set().union(*(range(*r) for r in got.values()))
    assert covered.isdisjoint(range(11, 20)) and covered.isdisjoint(range(31, 40))


def test_three_changepoints_use_earliest_and_latest():
    periods, gaps = fig4_layout()
    got = as_ranges(segment(series(), periods, gaps, {1: ChangePointSet((2, 5, 7), 9, 1.0)}))
    assert got[("B", 1)] == (20, 33) and got[("D", 2)] == (38, 51)


def test_changepoint_outside_gap_rejected():
    periods, gaps = fig4_layout()
    with pytest.raises(pipeline.SegmentationError):
        segment(series(), periods, gaps, {1: ChangePointSet((9,), 9, 1.0)})


def test_detector_finds_step_inside_gap():
    s = series()
    s.values[31:36, 5] = 10.0
    s.values[36:40, 5] = 50.0
    s.values[31:40, 5] += np.random.default_rng(0).normal(0, 0.1, 9)
    _, gaps = fig4_layout()
    found = pipeline.detect_gap_changepoints(s, gaps[1], pipeline.DetectorConfig())
    assert found.indices == (5,)


def test_prune_constant():
    frame = pd.DataFrame({"zero": np.zeros(10), "one_hit": np.eye(10)[3], "cat": list("ab") * 5})
    assert prune_constant_features(frame) == ["one_hit", "cat"]


def test_prune_constant_all_constant_warns(caplog):
    with caplog.at_level("WARNING"):
        assert prune_constant_features(pd.DataFrame({"a": [1, 1], "b": [0, 0]})) == []
    assert "constant" in caplog.text


def test_prune_identical_and_complement():
    f1 = np.array([0, 1, 1, 0, 1, 0, 0, 1.0])
    kept, report = prune_correlated_features(pd.DataFrame({"f2": f1, "f1": f1}))
    assert kept == ["f1"] and report == {"f2": "f1"}
    kept, _ = prune_correlated_features(pd.DataFrame({"f1": f1, "f2": 1 - f1}))
    assert kept == ["f1"]


def test_prune_three_column_component():
    rng = np.random.default_rng(0)
    base = rng.normal(size=4000)
    cols = {"a": base, "b": base + 0.15 * rng.normal(size=4000), "c": base + 0.15 * rng.normal(size=4000)}
    frame = pd.DataFrame(cols)
    corr = np.abs(np.corrcoef(frame.to_numpy(), rowvar=False))
    assert (corr[np.triu_indices(3, 1)] >= 0.95).all()
    kept, report = prune_correlated_features(frame, 0.95)
    assert kept == ["a"] and report == {"b": "a", "c": "a"}


def test_prune_chain_is_one_component():
    # a~b and b~c above threshold, a~c below: connected components still join them
    rng = np.random.default_rng(1)
    a = rng.normal(size=5000)
    b = a + 0.25 * rng.normal(size=5000)
    c = b + 0.25 * rng.normal(size=5000)
    frame = pd.DataFrame({"a": a, "b": b, "c": c})
    corr = np.abs(np.corrcoef(frame.to_numpy(), rowvar=False))
    assert corr[0, 1] >= 0.95 and corr[1, 2] >= 0.95 and corr[0, 2] < 0.95
    assert prune_correlated_features(frame, 0.95)[0] == ["a"]


def test_pruning_is_idempotent():
    rng = np.random.default_rng(2)
    frame = pd.DataFrame((rng.random((50, 8)) < 0.5).astype(float), columns=[f"f{i}" for i in range(8)])
    frame["g"] = frame["f3"]
    frame["z"] = 0.0
    once = prune_constant_features(frame)
    assert prune_constant_features(frame[once]) == once
    kept, _ = prune_correlated_features(frame[once])
    assert prune_correlated_features(frame[kept])[0] == kept


def test_one_hot():
    m, unseen = pipeline.one_hot_encode(["n78"], ["n28", "n41", "n78"])
    np.testing.assert_array_equal(m, [[0, 0, 1]])
    m, unseen = pipeline.one_hot_encode(["n77"], ["n28", "n41", "n78"])
    np.testing.assert_array_equal(m, [[0, 0, 0]])
    assert unseen == 1


def test_merge_drops_masked_rows_and_shares_config():
    a, b = series(100, "a"), series(100, "b")
    a.mask[[5, 50, 99]] = True
    segs = [(CellState("a", "S", 0), range(0, 100)), (CellState("b", "S", 0), range(0, 100))]
    manifest = [{"name": "x", "source": "x", "encoding": "numeric"}, {"name": "y", "source": "y", "encoding": "flag"}]
    data = pipeline.merge({"a": a, "b": b}, segs, {"S": np.array([3.0, 1.0])}, manifest)
    assert (data.frame.cell_id == "a").sum() == 97
    assert data.report["masked_rows"] == 3
    cfg = data.frame[["x", "y"]].drop_duplicates()
    assert len(cfg) == 1
    assert data.cell_state_counts().sum() == len(data)


def test_merge_empty_warns(caplog):
    with caplog.at_level("WARNING"):
        data = pipeline.merge({}, [], {}, [])
    assert len(data) == 0 and "empty" in caplog.text


def true_state_fraction(n_cells=50, seed=7, detector=pipeline.DetectorConfig()):
    """Share of dataset rows whose state id equals the generator's configuration at that time."""
    spec = NetworkSpec(n_cells=n_cells, seed=seed)
    profiles, model = generate_network(spec)
    pm = generate_pm_batch(profiles, model, spec)
    manifest = selected_manifest(spec.n_functionalities)
    selected = [e["path"] for e in manifest]
    snaps = {}
    start = parse_time(spec.start)
    for p in profiles:
        snaps[p.cell_id] = [cmstore.ConfigSnapshot(p.cell_id, start + timedelta(minutes=m),
                                                   cmstore.flatten_tree(p.param_tree(m)))
                            for m in snapshot_minutes(spec)]
    by_cell = {}
    for cell, g in pm.groupby("cell_id"):
        by_cell[cell] = PmSeries(cell, start, 60, g[[*ENV_COLUMNS, KPI_COLUMN]].to_numpy(), np.zeros(len(g), bool))
    data = pipeline.build_dataset(snaps, by_cell, manifest, pipeline.BuildConfig(detector))
    lookup = {p.cell_id: p for p in profiles}
    minutes = ((pd.to_datetime(data.frame.timestamp) - pd.Timestamp(start)).dt.total_seconds() // 60).astype(int)
    truth = [cmstore.state_id(cmstore.flatten_tree(lookup[c].param_tree(m)), selected)
             for c, m in zip(data.frame.cell_id, minutes)]
    return float(np.mean(np.asarray(truth) == data.frame.state_id.to_numpy())), len(data), data


def test_no_leakage_against_ground_truth():
    frac, n_on, data = true_state_fraction()
    assert frac >= 0.99
    frac_off, n_off, _ = true_state_fraction(detector=pipeline.DetectorConfig(enabled=False))
    assert frac_off == 1.0
    assert n_on >= n_off
    assert data.cell_state_counts().sum() == len(data)


def test_static_network_drops_nothing():
    spec = NetworkSpec(n_cells=4, horizon_days=3, change_prob_per_week=0.0)
    profiles, model = generate_network(spec)
    pm = generate_pm_batch(profiles, model, spec)
    start = T0
    snaps = {p.cell_id: [cmstore.ConfigSnapshot(p.cell_id, start + timedelta(days=d),
                                                cmstore.flatten_tree(p.param_tree(d * 1440))) for d in range(4)]
             for p in profiles}
    by_cell = {c: PmSeries(c, start, 60, g[[*ENV_COLUMNS, KPI_COLUMN]].to_numpy(), np.zeros(len(g), bool))
               for c, g in pm.groupby("cell_id")}
    data = pipeline.build_dataset(snaps, by_cell, selected_manifest(spec.n_functionalities))
    assert data.report["unstable_intervals"] == 0
    # the last snapshot sits at hour 72, one step past the PM horizon
    assert len(data) == len(pm)
