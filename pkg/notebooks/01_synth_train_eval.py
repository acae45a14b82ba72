"""Disaggregating a fridge from synthetic mains.

Generates a few houses, trains the compact model on the held-in houses and
scores it on the held-out one. Runs in a couple of minutes on one CPU.
Ten epochs on one synthetic day only starts to separate on and off
states; the acceptance test uses three days and forty epochs to reach
F1 above 0.9.
"""

# %%
import numpy as np

from nilmtx.config import DataConfig, SynthConfig, prepare_splits, synth_houses
from nilmtx.data import DEFAULT_APPLIANCES
from nilmtx.metrics import accuracy, f1, mae, mre
from nilmtx.model import NilmModel, count_params, predict, preset
from nilmtx.numerics import RngStream
from nilmtx.training import LossConfig, MaskingConfig, TrainConfig, fit

specs = dict(DEFAULT_APPLIANCES)
data = DataConfig(
    synthetic=SynthConfig(houses=3, duration=86400, noise_sigma=10.0, seed=7),
    train_stride=32,
    test_stride=64,
    agg_p_max=2500.0,
)
houses = synth_houses(data.synthetic, specs)
for h in houses:
    print(h.house_id, len(h.mains), "samples, peak mains", h.mains.max(), "W")

# %%
# House S1 is the test house; the rest feed training and validation.
splits = prepare_splits(houses, "fridge", specs, 64, data)
print("train", len(splits.train), "val", len(splits.val), "test", len(splits.test))

# %%
cfg = preset("compact", window_len=64)
model = NilmModel.init(cfg, RngStream(1))
print(count_params(model))

spec = specs["fridge"]
result = fit(
    model,
    splits.train,
    TrainConfig(epochs=10, lr=1e-3, seed=0),
    LossConfig(p_max=spec.p_max, on_threshold=spec.on_threshold),
    MaskingConfig(0.3),
    splits.val,
    on_epoch=lambda r: print(f"epoch {r.epoch}: loss {r.loss:.4f} val {r.val_loss:.4f}"),
)

# %%
pred = predict(result.model, splits.test.inputs) * spec.p_max
true = splits.test.targets * spec.p_max
on = lambda w: np.where(w >= spec.on_threshold, 1, -1)
print(f"acc {accuracy(on(pred), on(true)):.3f}  f1 {f1(on(pred), on(true)):.3f}")
print(f"mae {mae(pred, true):.1f} W  mre {mre(pred, true, spec):.3f}")
