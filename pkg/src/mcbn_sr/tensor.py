"""Forward/backward kernels on NCHW numpy arrays.

Everything here is a plain function over explicit arrays. Storage dtype is
whatever the caller passes in (float32 for training, float64 for gradient
checks); reductions that feed statistics or losses accumulate in float64.
Convolutions are stride 1 with zero "same" padding and no bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# upper bound on im2col elements materialised at once
_COL_BUDGET = 1 << 24


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


def _check_4d(x: np.ndarray, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _check_conv(x: np.ndarray, weights: np.ndarray) -> int:
    _check_4d(x, "input")
    if weights.ndim != 4:
        raise ShapeError(f"weights must be (C_out, C_in, k, k), got shape {weights.shape}")
    c_out, c_in, kh, kw = weights.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ShapeError(
            f"channel mismatch: input has C={x.shape[1]} but weights expect C_in={c_in}"
        )
    return kh


def _chunks(n: int, per_item: int):
    step = max(1, _COL_BUDGET // max(per_item, 1))
    for start in range(0, n, step):
        yield start, min(n, start + step)


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    # (n, C, h+k-1, w+k-1) -> (C*k*k, n*h*w), row order (c, di, dj)
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, h, w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * h * w)


def conv2d_forward(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Same-padded, stride-1 cross-correlation. Returns (N, C_out, H, W)."""
    k = _check_conv(x, weights)
    n, c_in, h, w = x.shape
    c_out = weights.shape[0]
    p = (k - 1) // 2
    w_mat = weights.reshape(c_out, -1).astype(x.dtype, copy=False)
    out = np.empty((n, c_out, h, w), dtype=x.dtype)
    for a, b in _chunks(n, c_in * k * k * h * w):
        xp = np.pad(x[a:b], ((0, 0), (0, 0), (p, p), (p, p)))
        y = w_mat @ _im2col(xp, k, h, w)
        out[a:b] = y.reshape(c_out, b - a, h, w).transpose(1, 0, 2, 3)
    return out


def conv2d_backward(
    grad_out: np.ndarray, cached_input: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * conv2d_forward(x, W)) w.r.t. x and W."""
    k = _check_conv(cached_input, weights)
    n, c_in, h, w = cached_input.shape
    c_out = weights.shape[0]
    if grad_out.shape != (n, c_out, h, w):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output {(n, c_out, h, w)}"
        )
    p = (k - 1) // 2
    dtype = cached_input.dtype
    w_mat = weights.reshape(c_out, -1).astype(dtype, copy=False)
    grad_w = np.zeros((c_out, c_in * k * k), dtype=np.float64)
    grad_x = np.empty_like(cached_input)
    for a, b in _chunks(n, c_in * k * k * h * w):
        xp = np.pad(cached_input[a:b], ((0, 0), (0, 0), (p, p), (p, p)))
        cols = _im2col(xp, k, h, w)
        g = grad_out[a:b].astype(dtype, copy=False).transpose(1, 0, 2, 3).reshape(c_out, -1)
        grad_w += g @ cols.T
        dcols = (w_mat.T @ g).reshape(c_in, k, k, b - a, h, w)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, i, j].transpose(1, 0, 2, 3)
        grad_x[a:b] = dxp[:, :, p:p + h, p:p + w]
    return grad_x, grad_w.reshape(weights.shape).astype(weights.dtype)


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------

@dataclass
class BnLayerParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ShapeError(
                f"gamma/beta must be equal-length vectors, got {self.gamma.shape} and {self.beta.shape}"
            )
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BnCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray


def _check_bn(x: np.ndarray, params: BnLayerParams) -> None:
    _check_4d(x, "input")
    if x.shape[1] != params.channels:
        raise ShapeError(
            f"input has C={x.shape[1]} but batch-norm layer has {params.channels} channels"
        )


def _affine(x, mean, var, params: BnLayerParams) -> np.ndarray:
    # mean/var broadcast against x: (C,) or (N, C); centring first keeps x == mean exact
    mean = np.asarray(mean, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    scale = params.gamma.astype(np.float64) / np.sqrt(var + params.eps)
    shift = params.beta.astype(np.float64)
    if scale.ndim == 1:
        mean, scale = mean[None, :, None, None], scale[None, :, None, None]
    else:
        mean, scale = mean[:, :, None, None], scale[:, :, None, None]
    dt = x.dtype
    return (x - mean.astype(dt)) * scale.astype(dt) + shift.astype(dt)[None, :, None, None]


def batch_statistics(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population variance over (N, H, W), cast to x.dtype."""
    _check_4d(x, "input")
    if x.shape[0] * x.shape[2] * x.shape[3] < 1:
        raise ShapeError("batch statistics need at least one element per channel")
    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    var = np.square(x - mean[None, :, None, None]).mean(axis=(0, 2, 3))
    return mean.astype(x.dtype), var.astype(x.dtype)


def batchnorm_train_forward(x: np.ndarray, params: BnLayerParams):
    """Normalise with the batch's own statistics.

    Returns ``(out, batch_mean, batch_var, cache)``; the returned statistics
    are exactly the values used for normalisation.
    """
    _check_bn(x, params)
    mean, var = batch_statistics(x)
    out = _affine(x, mean, var, params)
    inv_std = 1.0 / np.sqrt(var.astype(np.float64) + params.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None].astype(x.dtype)
    return out, mean, var, BnCache(xhat, inv_std, params.gamma)


def batchnorm_backward(grad_out: np.ndarray, cache: BnCache | None):
    """Gradient through training-mode BN, including the batch statistics."""
    if cache is None:
        raise ValueError("batchnorm_backward needs the cache from batchnorm_train_forward")
    if grad_out.shape != cache.xhat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != cached shape {cache.xhat.shape}")
    n, c, h, w = grad_out.shape
    m = n * h * w
    g = grad_out.astype(np.float64)
    xhat = cache.xhat.astype(np.float64)
    grad_beta = g.sum(axis=(0, 2, 3))
    grad_gamma = (g * xhat).sum(axis=(0, 2, 3))
    gamma = cache.gamma.astype(np.float64)
    coef = (gamma * cache.inv_std / m)[None, :, None, None]
    grad_x = coef * (m * g - grad_beta[None, :, None, None] - xhat * grad_gamma[None, :, None, None])
    dtype = grad_out.dtype
    return grad_x.astype(dtype), grad_gamma.astype(cache.gamma.dtype), grad_beta.astype(cache.gamma.dtype)


def batchnorm_eval_forward(x: np.ndarray, params: BnLayerParams, mean, var) -> np.ndarray:
    """Normalise every batch element with the supplied per-channel (mean, var)."""
    _check_bn(x, params)
    mean = np.asarray(mean)
    var = np.asarray(var)
    if mean.shape != (params.channels,) or var.shape != (params.channels,):
        raise ShapeError(
            f"mean/var must have shape ({params.channels},), got {mean.shape} and {var.shape}"
        )
    if np.any(var < 0):
        raise ValueError("variance must be non-negative")
    return _affine(x, mean, var, params)


def batchnorm_per_sample_forward(x: np.ndarray, params: BnLayerParams, means, variances) -> np.ndarray:
    """Normalise batch element t with stats pair t.

    ``means`` and ``variances`` are (T, C) arrays and T must equal the batch size.
    """
    _check_bn(x, params)
    means = np.asarray(means)
    variances = np.asarray(variances)
    expected = (x.shape[0], params.channels)
    if means.shape != expected or variances.shape != expected:
        raise ShapeError(
            f"per-sample stats must have shape {expected} (T == batch size), "
            f"got {means.shape} and {variances.shape}"
        )
    if np.any(variances < 0):
        raise ValueError("variance must be non-negative")
    return _affine(x, means, variances, params)


# ---------------------------------------------------------------------------
# activation / loss
# ---------------------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, cached_input: np.ndarray) -> np.ndarray:
    if grad_out.shape != cached_input.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {cached_input.shape}")
    return np.where(cached_input > 0, grad_out, 0).astype(grad_out.dtype)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    loss = float(np.mean(np.square(diff)))
    grad = (2.0 / diff.size) * diff
    return loss, grad.astype(pred.dtype)


# ---------------------------------------------------------------------------
# optimiser / init
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[np.ndarray], **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            **kw,
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState, lr: float):
    """Bias-corrected Adam update, applied to ``params`` in place.

    Returns ``(params, state)`` for convenience.
    """
    if not (0 <= state.beta1 < 1 and 0 <= state.beta2 < 1):
        raise ValueError(f"Adam betas must lie in [0, 1), got {state.beta1}, {state.beta2}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and Adam moments must have the same length")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)
    return params, state


def xavier_init(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Glorot-uniform draw in +-sqrt(6 / (fan_in + fan_out)).

    For a conv weight (C_out, C_in, k, k) the fans include the receptive field.
    """
    shape = tuple(shape)
    if len(shape) < 2:
        raise ShapeError(f"xavier_init needs at least 2 dims, got {shape}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
