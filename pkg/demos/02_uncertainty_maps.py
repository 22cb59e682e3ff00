# %% [markdown]
# # Uncertainty maps from batch-norm statistics
#
# Train a small ×2 network on synthetic textures, collect T sets of batch
# statistics from training crops, then super-resolve a held-out image T
# times, once per set. The per-pixel mean is the reconstruction and the
# per-pixel variance is the uncertainty map.
#
# This uses the shipped desk.ini unchanged: an 8-layer, 32-channel network
# and 1500 updates, about five minutes on one core.

# %%
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from mcbn_sr import cli, data, mcbn, metrics
from mcbn_sr.config import load_config

FIG_DIR = Path(__file__).resolve().parent / "figures"
FIG_DIR.mkdir(exist_ok=True)
DESK = Path(cli.__file__).parent / "configs" / "desk.ini"

# %% [markdown]
# ## A synthetic dataset
# Eight 96×96 textured images to train on, one to validate and one to test.

# %%
root = Path(tempfile.mkdtemp(prefix="mcbn_demo_"))
for split, count, offset in (("train", 8, 0), ("val", 1, 200), ("test", 1, 100)):
    (root / split).mkdir()
    for i in range(count):
        img = data.synthetic_image(96, 96, np.random.default_rng([7, offset + i]))
        data.save_png(img, root / split / f"{split}{i:02d}.png")

cfg = load_config(DESK, [f"paths.train_dir={root / 'train'}", f"paths.val_dir={root / 'val'}",
                         f"paths.test_dir={root / 'test'}", f"paths.output_dir={root / 'out'}",
                         f"paths.checkpoint={root / 'out' / 'model.mcsr'}",
                         f"paths.stats_file={root / 'out' / 'stats.mcbn'}"])

# %% [markdown]
# ## Train, then estimate the statistics sets

# %%
result = cli.cmd_train(cfg)
stats = cli.cmd_estimate_stats(cfg)
params = cli._load_checkpoint(cfg)

loss = np.asarray(result["log"].loss)
plt.figure(figsize=(5, 3))
plt.semilogy(loss, lw=0.5, alpha=0.5)
plt.semilogy(np.arange(49, len(loss)), np.convolve(loss, np.ones(50) / 50, "valid"))
plt.xlabel("update")
plt.ylabel("MSE")
plt.tight_layout()
plt.savefig(FIG_DIR / "training_loss.png", dpi=120)

# %% [markdown]
# ## MC inference on the held-out image
# Bicubic input versus MC mean, with boundary pixels cropped before scoring.

# %%
hr = data.crop_to_multiple(data.load_png(root / "test" / "test00.png"), 2)
lr = data.make_interpolated_lr(hr, 2)
mc = mcbn.mc_infer_fast(params, lr, stats, cfg.run.T)
c = lambda a: data.crop_boundary(a, 2)  # noqa: E731
print(f"bicubic PSNR {metrics.psnr(c(lr), c(hr)):.2f} dB, MC mean PSNR {metrics.psnr(c(mc.mean_image), c(hr)):.2f} dB")
row = metrics.score_image("test00", c(mc.mean_image), c(mc.variance_map), c(hr), mc.T, cfg.run.var_floor)
print(f"SSIM {row.ssim:.4f}  PLL/pixel {row.pll_per_pixel:.3f}  CRPS {row.crps_mean:.5f}")

# %% [markdown]
# Where is the network unsure? Typically along edges, which is also where
# the error is largest.

# %%
err = np.abs(mc.mean_image - hr)
fig, ax = plt.subplots(1, 4, figsize=(12, 3.2))
for a, im, title in zip(ax, (hr, lr, err, mc.variance_map), ("HR", "bicubic input", "|error|", "MC variance")):
    a.imshow(im, cmap="gray" if title in ("HR", "bicubic input") else "viridis")
    a.set_title(title)
    a.axis("off")
plt.tight_layout()
plt.savefig(FIG_DIR / "uncertainty.png", dpi=120)

inner = c(err).ravel(), c(mc.variance_map).ravel()
print("pixel correlation between |error| and std:", np.corrcoef(inner[0], np.sqrt(inner[1]))[0, 1].round(3))

# %% [markdown]
# ## How many samples?
# The MC mean moves less and less as T grows. Compare each partial mean to the
# full-T mean.

# %%
ts = [1, 2, 3, 5, 8, 12, 16, 20, 25]
gap = [np.abs(mcbn.mc_infer_fast(params, lr, stats, t).mean_image - mc.mean_image).mean() for t in ts]
plt.figure(figsize=(4, 3))
plt.plot(ts, gap, "o-")
plt.xlabel("T")
plt.ylabel("mean |partial − full|")
plt.tight_layout()
plt.savefig(FIG_DIR / "mc_convergence.png", dpi=120)
print("  ".join(f"T={t}: {g:.5f}" for t, g in zip(ts, gap)))
