# %% [markdown]
# # A small synthetic network
#
# Generate a handful of cells, look at their configurations, and check the
# throughput law on one PM row.

# %%
import numpy as np

from cmpm.datagen import NetworkSpec, generate_network, generate_pm_batch, ground_truth_throughput

spec = NetworkSpec(n_cells=8, horizon_days=14, seed=7)
profiles, truth = generate_network(spec)
pm = generate_pm_batch(profiles, truth, spec)
print(pm.shape)
pm.head()

# %% [markdown]
# Only the first `active_effect_count` functionality flags move throughput.

# %%
print(np.round(truth.functionality_effects[:12], 3))

# %%
for p in profiles[:4]:
    print(p.cell_id, p.basic_params["NRCELL/bandwidth_MHz"], p.basic_params["NRCELL/band"],
          f"load={p.latent_load:.2f}", [c.minute // 60 for c in p.scheduled_changes])

# %% [markdown]
# Recompute the first row of cell 0 from its configuration, minus the noise term.

# %%
p = profiles[0]
row = pm.iloc[0]
params, flags = p.config_at(0)
clean = ground_truth_throughput(params, flags, row.cqi, row.bler, row.prb_util, truth)
print(f"recorded {row.dl_throughput:.3f}  noiseless {clean:.3f}  ratio {row.dl_throughput / clean:.3f}")

# %% [markdown]
# Load follows the hour of day; peak around 14:00 UTC.

# %%
hourly = pm.assign(hour=pm.timestamp.str[11:13].astype(int)).groupby("hour").active_ues.mean()
print(hourly.round(1).to_string())
