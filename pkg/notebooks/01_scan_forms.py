# %% [markdown]
# # Recurrent and convolutional forms of a discretized SSM
#
# A time-invariant SSM can be run step by step or as one causal convolution with
# the kernel K_k = C A_bar^k B_bar.  This script discretizes a random diagonal
# system, runs both forms and compares them.  Then it times the recurrence over
# growing sequence lengths.

# %%
import time

import numpy as np

from drowzee.cli import loglog_fit
from drowzee.ssm import ssm_apply_conv, ssm_conv_kernel, ssm_recurrence, zoh_discretize
from drowzee.tensor import no_grad

rng = np.random.default_rng(0)
channels, N = 4, 16
A = -rng.uniform(0.05, 2.0, size=(channels, N))
B, C = rng.normal(size=(channels, N)), rng.normal(size=(channels, N))
delta = rng.uniform(0.01, 1.0, size=(channels, 1))

# %%
with no_grad():
    d = zoh_discretize(A, B, delta)
    x = rng.normal(size=(1, 256, channels))
    y_rec = ssm_recurrence(d, C, x).data
    y_conv = ssm_apply_conv(x, ssm_conv_kernel(d, C, 256)).data
print("max |recurrence - convolution| =", np.abs(y_rec - y_conv).max())

# %% [markdown]
# The kernel decays like max|A_bar|^k, so only the first few hundred taps matter here.

# %%
K = ssm_conv_kernel(d, C, 256).data
print("kernel magnitude at k = 0, 32, 128:", np.abs(K[:, [0, 32, 128]]).max(axis=0))

# %%
lengths = [256, 512, 1024, 2048, 4096]
times = []
with no_grad():
    for L in lengths:
        x = rng.normal(size=(1, L, channels))
        runs = []
        for _ in range(5):
            t0 = time.perf_counter()
            ssm_recurrence(d, C, x)
            runs.append(time.perf_counter() - t0)
        times.append(min(runs))
slope, r2 = loglog_fit(lengths, times)
for L, t in zip(lengths, times):
    print(f"L={L:5d}  {t * 1e3:7.2f} ms")
print(f"log-log slope {slope:.2f}, R^2 {r2:.4f}")
