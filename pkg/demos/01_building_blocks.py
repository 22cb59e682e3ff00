# %% [markdown]
# # Building blocks: convolutions, batch norm and a residual SR network
#
# Everything here is plain numpy. We check a few layer gradients against
# finite differences, then look at what the global skip does for an
# untrained network.

# %%
import numpy as np

from mcbn_sr import network as N
from mcbn_sr import tensor as T

rng = np.random.default_rng(0)

# %% [markdown]
# ## A convolution and its gradient
# Same-padded, stride 1, no bias. The backward pass returns the input and
# weight gradients; a central difference on one weight entry agrees.

# %%
x = rng.standard_normal((2, 3, 8, 8))
w = rng.standard_normal((4, 3, 3, 3)) * 0.2
g = rng.standard_normal((2, 4, 8, 8))
gx, gw = T.conv2d_backward(g, x, w)

h = 1e-5
w[1, 2, 0, 1] += h
up = np.sum(T.conv2d_forward(x, w) * g)
w[1, 2, 0, 1] -= 2 * h
down = np.sum(T.conv2d_forward(x, w) * g)
w[1, 2, 0, 1] += h
print("analytic", gw[1, 2, 0, 1], "numeric", (up - down) / (2 * h))

# %% [markdown]
# ## Batch norm in training mode
# The output of each channel has zero mean and (almost) unit variance; the
# batch moments are returned too, since they are what MC sampling reuses.

# %%
bn = T.BnLayerParams(np.ones(3), np.zeros(3))
z = rng.normal(4.0, 3.0, (8, 3, 6, 6))
out, mean, var, _ = T.batchnorm_train_forward(z, bn)
print("batch means", np.round(mean, 3))
print("output mean/var per channel", np.round(out.mean(axis=(0, 2, 3)), 6), np.round(out.var(axis=(0, 2, 3)), 4))

# %% [markdown]
# ## The network
# D convolutions, BN + ReLU in between, plus a skip from input to output.
# With every weight zeroed the network is exactly the identity.

# %%
params = N.build_network(N.NetworkConfig(depth=6, channels=16), rng)
print("parameters:", params.parameter_count())

img = rng.uniform(size=(1, 1, 24, 24)).astype(np.float32)
for wt in params.weights:
    wt[...] = 0
out, _, _ = N.forward_train(params, img)
print("identity when weights are zero:", np.array_equal(out, img))

# %% [markdown]
# ## One training step
# Loss and gradients come from the hand-written backward pass; Adam applies
# them. The loss on this batch goes down after a handful of steps.

# %%
params = N.build_network(N.NetworkConfig(depth=6, channels=16), np.random.default_rng(1))
state = T.AdamState.for_params(params.arrays())
target = np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1).astype(np.float32)
batch = np.concatenate([img, img[:, :, ::-1]]), np.concatenate([target, target[:, :, ::-1]])
for step in range(30):
    loss = N.train_step(params, state, *batch, lr=1e-3)
    if step % 10 == 0:
        print(f"step {step:2d} loss {loss:.5f}")
