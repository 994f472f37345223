# %% [markdown]
# # From CM snapshots and PM counters to a training table
#
# Same steps as `cmpm gen` and `cmpm build`, called as library functions.

# %%
import tempfile
from pathlib import Path

from cmpm import cmstore, pipeline, pmstore
from cmpm.datagen import (NetworkSpec, emit_cm_snapshots, generate_network, generate_pm_batch, selected_manifest,
                          write_pm_csv)

spec = NetworkSpec(n_cells=30, horizon_days=21, seed=3)
profiles, truth = generate_network(spec)
work = Path(tempfile.mkdtemp())
(work / "cm").mkdir()
emit_cm_snapshots(profiles, spec, work / "cm")
write_pm_csv(generate_pm_batch(profiles, truth, spec), work / "pm.csv")

snapshots = cmstore.load_snapshots((work / "cm").glob("cm_*.json"))
series = pmstore.ingest_pm_csv(work / "pm.csv", spec.pm_interval_minutes)
manifest = selected_manifest(spec.n_functionalities)

# %% [markdown]
# Stable periods and the open gaps between them for one cell that changed.

# %%
cell = next(p.cell_id for p in profiles if p.scheduled_changes)
periods, gaps = cmstore.derive_stable_periods(snapshots[cell], [e["path"] for e in manifest])
for p in periods:
    print("stable  ", p.start, "->", p.end, p.state_id[:8])
for g in gaps:
    print("unstable", g.start, "->", g.end)

# %% [markdown]
# With and without change-point expansion.

# %%
for enabled in (True, False):
    cfg = pipeline.BuildConfig(pipeline.DetectorConfig(enabled=enabled))
    data = pipeline.build_dataset(snapshots, series, manifest, cfg)
    rep = data.report
    print(f"detection={enabled!s:5} rows={len(data)} gaps={rep['unstable_intervals']} "
          f"gaps_with_change_points={rep['changepoint_gaps']} features={len(data.feature_manifest)}")

# %%
print(data.report["encoder"]["correlated_dropped"])
data.frame.iloc[:3, :10]
