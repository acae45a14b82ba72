"""A one-factor sweep over encoder depth.

Each row changes only the swept hyperparameter; seeds are fixed per cell,
so rerunning the table reproduces it byte for byte.
"""

# %%
from nilmtx.config import DataConfig, SynthConfig, prepare_splits, synth_houses
from nilmtx.data import DEFAULT_APPLIANCES
from nilmtx.model import preset
from nilmtx.sweep import SweepGrid, run_sweep
from nilmtx.training import TrainConfig

specs = dict(DEFAULT_APPLIANCES)
data = DataConfig(synthetic=SynthConfig(houses=2, duration=6 * 3600, seed=3), train_stride=32, agg_p_max=2500.0)
houses = synth_houses(data.synthetic, specs)
splits = {a: prepare_splits(houses, a, specs, 32, data) for a in ("fridge", "microwave")}

# %%
grid = SweepGrid("n_layers", [1, 2, 3], preset("bert4nilm-base", hidden_dim=16, window_len=32))
table = run_sweep(grid, splits, specs, TrainConfig(epochs=2, batch_size=32), base_seed=42, append_proposed=True)
print(table.to_text())

# %%
print(table.timing_csv())
