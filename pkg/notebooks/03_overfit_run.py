# %% [markdown]
# # Overfitting eight pairs
#
# Train the desk-scale model on eight pairs and sample on the same eight
# sources.  The loss drops fast.  Whether the samples look like the targets is
# a separate question, answered at the bottom.
#
# Takes about ten minutes on one core at 2000 iterations.

# %%
import time

import numpy as np

from i2idit.data import encode_ppm, pairs_in_memory
from i2idit.rng import Rng
from i2idit.sampler import generate, grid_image, psnr, score
from i2idit.train import TrainConfig, restore, train

ITERS = 2000

# %%
src, tgt = pairs_in_memory(7, range(8))
cfg = TrainConfig(iterations=ITERS, batch_size=8, lr=1e-4, T=200, seed=0)
start = time.perf_counter()
ckpt, rows = train(cfg, (src, tgt))
print(f"trained {ITERS} steps in {time.perf_counter() - start:.0f}s")

# %%
total = np.array([float(r[1]) for r in rows])
eps = np.array([float(r[2]) for r in rows])
k = min(100, len(rows))
print("total loss, first/last %d mean: %.4f -> %.4f" % (k, total[:k].mean(), total[-k:].mean()))
print("eps mse,    first/last %d mean: %.4f -> %.4f" % (k, eps[:k].mean(), eps[-k:].mean()))

# %% [markdown]
# ## Samples
#
# Two reference points put the PSNR numbers in context: an all-white canvas and
# the pixel mean of the eight targets.  Neither looks at the source.

# %%
print("white canvas  %.2f dB" % np.mean([psnr(np.ones_like(t), t) for t in tgt]))
print("mean target   %.2f dB" % np.mean([psnr(tgt.mean(0), t) for t in tgt]))

_, comp = restore(ckpt)
outputs = {}
for mode in ("full", "partial"):
    outputs[mode] = generate(comp, src, mode, None, Rng(0).split(mode))
    r = score(comp.encoder, outputs[mode], src, tgt, range(8))
    print(f"{mode:8s} {r.mean['psnr_db']:.2f} dB, cos to target {r.mean['cos_tgt']:.4f}")

# %% [markdown]
# Does the condition matter?  Sample again with each source paired to another
# source's embedding.

# %%
shuffled = generate(comp, src, "partial", None, Rng(0).split("partial"), cond_sources=src[np.roll(np.arange(8), 1)])
print("partial, shuffled condition: max pixel change %.4f" % np.abs(shuffled - outputs["partial"]).max())

# %%
grid = grid_image([(s, t, o) for s, t, o in zip(src, tgt, outputs["partial"])])
with open("overfit_samples.ppm", "wb") as fh:
    fh.write(encode_ppm(grid))
