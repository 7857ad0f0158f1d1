# %% [markdown]
# # Training the default model on synthetic EEG
#
# Drowsy epochs carry strong theta and alpha rhythms, awake epochs strong beta.
# We train the default one-block model for a few epochs and compare with a
# logistic regression on log band powers.  A full run (30 epochs, 2000 epochs of
# data) is what `drowzee train` does; this script uses fewer samples so it
# finishes in well under a minute.

# %%
import numpy as np

from drowzee import SplitSpec, TrainConfig, build_model, evaluate, split_dataset, synth_generate, train
from drowzee.data import BANDS, band_power
from drowzee.model import count_params
from drowzee.train import BandPowerLogistic

data = synth_generate(600, seed=7, snr=5.0)
tr, va, te = split_dataset(data, SplitSpec(seed=0))
print(len(tr), len(va), len(te), "epochs; class counts", data.class_counts())

# %%
slow = band_power(data.epochs, (BANDS["theta"][0], BANDS["alpha"][1])).mean(axis=1)
fast = band_power(data.epochs, BANDS["beta"]).mean(axis=1)
print("threshold rule accuracy:", ((slow > fast) == data.labels).mean())

# %%
model = build_model()
print("parameters:", count_params(model))
result = train(model, tr, va, TrainConfig(max_epochs=3, seed=0), on_epoch=lambda r: print(r.line()))

# %%
report = evaluate(result.model, te)
baseline = BandPowerLogistic().fit(tr).evaluate(te)
print(report.summary_line())
print("confusion:\n", report.confusion)
print("band-power baseline:", baseline.summary_line())
