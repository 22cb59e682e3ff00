# %% [markdown]
# # Scoring a Gaussian predictive distribution
#
# PSNR and SSIM only look at the mean image. PLL and CRPS also reward a
# variance that matches the size of the error. Here we see how each behaves
# for a single pixel.

# %%
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from mcbn_sr import metrics

FIG_DIR = Path(__file__).resolve().parent / "figures"
FIG_DIR.mkdir(exist_ok=True)


def score(err, s2):
    f = metrics.PredictiveField(np.zeros(1), np.array([s2]), var_floor=0.0)
    y = np.array([err])
    return metrics.pll(f, y)[0], metrics.crps(f, y)


# %% [markdown]
# ## Closed form against a direct integral
# The CRPS closed form agrees with trapezoid integration of the squared CDF
# difference.

# %%
for err, s2 in [(0.0, 1.0), (0.5, 0.04), (-2.0, 0.3)]:
    _, closed = score(err, s2)
    print(f"err {err:5.2f} var {s2:4.2f}: closed {closed:.8f}  numeric {metrics.crps_numeric(0.0, s2, err):.8f}")

# %% [markdown]
# ## Which variance scores best?
# For a fixed error e, PLL peaks at exactly σ² = e². CRPS bottoms out at a
# somewhat larger σ and penalises overconfidence less harshly.

# %%
sig = np.logspace(-3, 0, 200)
fig, ax = plt.subplots(1, 2, figsize=(9, 3.2))
for err in (0.01, 0.05, 0.2):
    p, c = zip(*(score(err, s ** 2) for s in sig))
    ax[0].semilogx(sig, p, label=f"|error| = {err}")
    ax[1].loglog(sig, c, label=f"|error| = {err}")
    print(f"|error| {err}: best PLL at sigma {sig[np.argmax(p)]:.4f}, best CRPS at sigma {sig[np.argmin(c)]:.4f}")
ax[0].set_xlabel("σ")
ax[0].set_ylabel("PLL")
ax[1].set_xlabel("σ")
ax[1].set_ylabel("CRPS")
ax[0].legend()
plt.tight_layout()
plt.savefig(FIG_DIR / "scoring_rules.png", dpi=120)

# %% [markdown]
# ## Zero variance needs a floor
# A perfect prediction with zero MC variance has infinite PLL and zero
# CRPS in the limit. The variance floor keeps both finite.

# %%
for floor in (1e-4, 1e-6, 1e-8):
    f = metrics.PredictiveField(np.full(4, 0.3), np.zeros(4), var_floor=floor)
    print(f"floor {floor:.0e}: PLL/pixel {metrics.pll(f, np.full(4, 0.3))[1]:8.3f}  CRPS {metrics.crps(f, np.full(4, 0.3)):.2e}")
