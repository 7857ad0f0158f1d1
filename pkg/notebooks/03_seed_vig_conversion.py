# %% [markdown]
# # Converting SEED-VIG recordings
#
# SEED-VIG is licensed and not shipped here.  Each session provides a raw EEG
# matrix (17 channels at 1000 Hz in the distributed files) and a PERCLOS vector
# with one value per 8 s window.  `preprocess_recording` expects one PERCLOS
# value per 1 s epoch, so the vector is repeated 8 times.
#
# Set `SEED_VIG_ROOT` to a directory with `Raw_Data/*.mat` and `perclos_labels/*.mat`
# to convert real sessions.  Without it, a random recording stands in so the
# pipeline can be checked end to end.

# %%
import os
from pathlib import Path

import numpy as np
from scipy.io import loadmat

from drowzee.data import EEGDataset, preprocess_recording, save_dataset

root = os.environ.get("SEED_VIG_ROOT")
out_dir = Path(os.environ.get("OUT_DIR", "converted"))
out_dir.mkdir(exist_ok=True)


def sessions(root):
    for raw in sorted(Path(root, "Raw_Data").glob("*.mat")):
        eeg = loadmat(raw)["EEG"]["data"][0, 0].T           # (channels, samples)
        perclos = loadmat(Path(root, "perclos_labels", raw.name))["perclos"].ravel()
        yield raw.stem, eeg, np.repeat(perclos, 8)


def fake_sessions():
    rng = np.random.default_rng(0)
    yield "fake", rng.normal(size=(17, 64 * 1000)), np.repeat(rng.uniform(0, 1, 8), 8)


# %%
parts = []
for name, eeg, perclos in (sessions(root) if root else fake_sessions()):
    d = preprocess_recording(eeg, perclos=perclos, sample_rate=1000.0)
    d.provenance = "real" if root else "synthetic"
    print(f"{name}: {len(d)} epochs, drowsy fraction {d.labels.mean():.2f}")
    parts.append(d)

# %%
merged = EEGDataset(np.concatenate([p.epochs for p in parts]),
                    np.concatenate([p.labels for p in parts]), provenance=parts[0].provenance)
save_dataset(merged, out_dir / "seed_vig.bin")
print("wrote", len(merged), "epochs to", out_dir / "seed_vig.bin")
