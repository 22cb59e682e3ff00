"""BN-VDSR: a D-layer residual CNN with batch norm after every conv but the last.

Layer l < D is ``conv -> batch norm -> ReLU``; layer D is a bare conv. No layer
has a bias. The network predicts a residual that is added to its input
(an interpolated low-resolution image), so zero weights give the identity.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import BnLayerParams, ShapeError


class NonFiniteError(FloatingPointError):
    """Raised when activations or the loss stop being finite."""


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 8
    channels: int = 32
    kernel: int = 3
    image_channels: int = 1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.depth < 3:
            raise ValueError(f"depth must be >= 3, got {self.depth}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be a positive odd integer, got {self.kernel}")
        if self.image_channels not in (1, 3):
            raise ValueError(f"image_channels must be 1 (luma) or 3 (RGB), got {self.image_channels}")

    def layer_shapes(self) -> list[tuple[int, int, int, int]]:
        c, k, ic = self.channels, self.kernel, self.image_channels
        return [(c, ic, k, k)] + [(c, c, k, k)] * (self.depth - 2) + [(ic, c, k, k)]

    def parameter_count(self) -> int:
        conv = sum(int(np.prod(s)) for s in self.layer_shapes())
        return conv + 2 * self.channels * (self.depth - 1)


@dataclass
class ModelParams:
    config: NetworkConfig
    weights: list[np.ndarray]
    bn: list[BnLayerParams]

    def __post_init__(self):
        if len(self.weights) != self.config.depth or len(self.bn) != self.config.depth - 1:
            raise ShapeError(
                f"expected {self.config.depth} conv layers and {self.config.depth - 1} BN layers, "
                f"got {len(self.weights)} and {len(self.bn)}"
            )

    def arrays(self) -> list[np.ndarray]:
        """Learnable arrays in declaration order: W1, g1, b1, ..., W_D."""
        out = []
        for l, w in enumerate(self.weights):
            out.append(w)
            if l < len(self.bn):
                out += [self.bn[l].gamma, self.bn[l].beta]
        return out

    def parameter_count(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    @property
    def bn_layers(self) -> int:
        return len(self.bn)


# per BN layer: (mean, var); (C,) for one stats set or (T, C) for T sets
BatchStatsRecord = list[tuple[np.ndarray, np.ndarray]]


def build_network(cfg: NetworkConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    weights = [T.xavier_init(shape, rng, dtype) for shape in cfg.layer_shapes()]
    bn = [
        BnLayerParams(np.ones(cfg.channels, dtype), np.zeros(cfg.channels, dtype), cfg.bn_eps)
        for _ in range(cfg.depth - 1)
    ]
    return ModelParams(cfg, weights, bn)


def _check_input(params: ModelParams, x: np.ndarray) -> None:
    T._check_4d(x, "input")
    if x.shape[1] != params.config.image_channels:
        raise ShapeError(
            f"network expects {params.config.image_channels} image channel(s), got {x.shape[1]}"
        )
    k = params.config.kernel
    if x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"spatial size {x.shape[2:]} is smaller than the kernel ({k})")


def _finite(h: np.ndarray, layer: int) -> None:
    if not np.isfinite(h).all():
        raise NonFiniteError(f"non-finite activations after layer {layer}")


@dataclass
class ForwardCache:
    conv_inputs: list[np.ndarray] = field(default_factory=list)
    bn_caches: list[T.BnCache] = field(default_factory=list)
    relu_inputs: list[np.ndarray] = field(default_factory=list)


def forward_train(params: ModelParams, batch: np.ndarray, keep_cache: bool = True):
    """Forward pass normalising with the batch's own statistics.

    Returns ``(output, stats, cache)``, where ``stats`` records every BN
    layer's batch (mean, var). With ``keep_cache=False`` the cache is None and
    intermediate activations are released as the pass proceeds.
    """
    _check_input(params, batch)
    cache = ForwardCache() if keep_cache else None
    stats: BatchStatsRecord = []
    h = batch
    for l, bn in enumerate(params.bn):
        z = T.conv2d_forward(h, params.weights[l])
        zn, mean, var, bc = T.batchnorm_train_forward(z, bn)
        if cache is not None:
            cache.conv_inputs.append(h)
            cache.bn_caches.append(bc)
            cache.relu_inputs.append(zn)
        stats.append((mean, var))
        h = T.relu_forward(zn)
        _finite(h, l + 1)
    if cache is not None:
        cache.conv_inputs.append(h)
    out = batch + T.conv2d_forward(h, params.weights[-1])
    _finite(out, params.config.depth)
    return out, stats, cache


def collect_batch_stats(params: ModelParams, batch: np.ndarray) -> BatchStatsRecord:
    """Every BN layer's batch statistics for ``batch`` (no cache kept)."""
    return forward_train(params, batch, keep_cache=False)[1]


def _check_stats(params: ModelParams, stats, per_sample_n: int | None) -> None:
    if len(stats) != params.bn_layers:
        raise ShapeError(f"expected stats for {params.bn_layers} BN layers, got {len(stats)}")
    c = params.config.channels
    want = (c,) if per_sample_n is None else (per_sample_n, c)
    for l, (mean, var) in enumerate(stats):
        if np.shape(mean) != want or np.shape(var) != want:
            raise ShapeError(
                f"BN layer {l + 1}: stats must have shape {want}, got {np.shape(mean)} and {np.shape(var)}"
            )


def forward_eval(params: ModelParams, x: np.ndarray, stats: BatchStatsRecord, mode: str = "fixed"):
    """Forward pass with supplied BN statistics.

    mode="fixed": every batch element uses the same (C,) stats per layer.
    mode="per_sample": stats are (T, C) per layer and element t uses row t;
    this requires x.shape[0] == T.
    """
    _check_input(params, x)
    if mode == "fixed":
        _check_stats(params, stats, None)
        norm = T.batchnorm_eval_forward
    elif mode == "per_sample":
        _check_stats(params, stats, x.shape[0])
        norm = T.batchnorm_per_sample_forward
    else:
        raise ValueError(f"unknown stats mode {mode!r}; use 'fixed' or 'per_sample'")
    h = x
    for l, bn in enumerate(params.bn):
        mean, var = stats[l]
        h = T.relu_forward(norm(T.conv2d_forward(h, params.weights[l]), bn, mean, var))
        _finite(h, l + 1)
    out = x + T.conv2d_forward(h, params.weights[-1])
    _finite(out, params.config.depth)
    return out


def forward_with_reference(params: ModelParams, reference: np.ndarray, x: np.ndarray):
    """Run ``x`` alongside a reference batch whose statistics drive every BN layer.

    The statistics come from the reference members only. When spatial sizes
    agree the two are stacked into one batch per conv (the conventional
    "test image fed with a training batch" pass); otherwise they run in
    lockstep. Returns ``(output_for_x, stats)``.
    """
    _check_input(params, reference)
    _check_input(params, x)
    stacked = reference.shape[1:] == x.shape[1:]
    b = reference.shape[0]
    stats: BatchStatsRecord = []
    if stacked:
        h = np.concatenate([reference, x], axis=0)
        for l, bn in enumerate(params.bn):
            z = T.conv2d_forward(h, params.weights[l])
            mean, var = T.batch_statistics(z[:b])
            stats.append((mean, var))
            h = T.relu_forward(T.batchnorm_eval_forward(z, bn, mean, var))
            _finite(h, l + 1)
        h = h[b:]
    else:
        r, h = reference, x
        for l, bn in enumerate(params.bn):
            zr = T.conv2d_forward(r, params.weights[l])
            mean, var = T.batch_statistics(zr)
            stats.append((mean, var))
            r = T.relu_forward(T.batchnorm_eval_forward(zr, bn, mean, var))
            h = T.relu_forward(T.batchnorm_eval_forward(T.conv2d_forward(h, params.weights[l]), bn, mean, var))
            _finite(h, l + 1)
    out = x + T.conv2d_forward(h, params.weights[-1])
    _finite(out, params.config.depth)
    return out, stats


def backward(params: ModelParams, cache: ForwardCache, grad_out: np.ndarray) -> list[np.ndarray]:
    """Gradients for ``params.arrays()`` given dLoss/dOutput of forward_train."""
    if cache is None:
        raise ValueError("backward needs the cache from forward_train(keep_cache=True)")
    depth = params.config.depth
    grads: list = [None] * (3 * (depth - 1) + 1)
    # the residual skip adds grad_out straight to the input; inputs are not learnable
    g, grads[-1] = T.conv2d_backward(grad_out, cache.conv_inputs[-1], params.weights[-1])
    for l in range(depth - 2, -1, -1):
        g = T.relu_backward(g, cache.relu_inputs[l])
        g, grads[3 * l + 1], grads[3 * l + 2] = T.batchnorm_backward(g, cache.bn_caches[l])
        g, grads[3 * l] = T.conv2d_backward(g, cache.conv_inputs[l], params.weights[l])
    return grads


def loss_and_grads(params: ModelParams, batch_lr: np.ndarray, batch_hr: np.ndarray):
    out, _, cache = forward_train(params, batch_lr)
    loss, g = T.mse_loss(out, batch_hr)
    if not np.isfinite(loss):
        raise NonFiniteError(f"loss is not finite ({loss})")
    return loss, backward(params, cache, g)


def train_step(params: ModelParams, adam_state: T.AdamState, batch_lr, batch_hr, lr: float) -> float:
    """One forward/backward/Adam update over all W, gamma, beta. Returns the loss."""
    loss, grads = loss_and_grads(params, batch_lr, batch_hr)
    T.adam_step(params.arrays(), grads, adam_state, lr)
    return loss


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class Schedule:
    """Batch-update schedule; the rate halves every ``halve_every`` updates."""

    iterations: int
    lr: float = 1e-4
    halve_every: int = 400
    val_every: int = 50
    # reference batches averaged into the BN stats used for validation
    val_stat_batches: int = 4

    def lr_at(self, k: int) -> float:
        """Learning rate for the k-th update (1-based)."""
        if k < 1:
            raise ValueError("updates are counted from 1")
        if self.halve_every <= 0:
            return self.lr
        return self.lr * 0.5 ** ((k - 1) // self.halve_every)


@dataclass
class TrainLog:
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    val: list[tuple[int, float]] = field(default_factory=list)
    best_iteration: int = 0
    best_val: float = float("inf")


def averaged_stats(records: list[BatchStatsRecord]) -> BatchStatsRecord:
    """Layer-wise mean of several stats records (a deterministic 'population' estimate)."""
    out = []
    for layer in zip(*records):
        means = np.stack([m for m, _ in layer])
        vs = np.stack([v for _, v in layer])
        out.append((means.mean(axis=0, dtype=np.float64).astype(means.dtype),
                    vs.mean(axis=0, dtype=np.float64).astype(vs.dtype)))
    return out


def validation_loss(params: ModelParams, stats: BatchStatsRecord, val_lr, val_hr) -> float:
    out = forward_eval(params, val_lr, stats, mode="fixed")
    return T.mse_loss(out, val_hr)[0]


def train_loop(params: ModelParams, dataset, schedule: Schedule, rng: np.random.Generator,
               validation=None, val_rng_seed: int = 0, log_fn=None):
    """Train ``params`` in place and return ``(best_params, log)``.

    ``dataset`` must provide ``batches(rng)`` (an endless iterator of
    ``(lr, hr)`` NCHW batches) and ``reference_batches(rng, count)``.
    ``validation`` is an optional ``(lr_patches, hr_patches)`` pair; when given,
    the parameters with the lowest validation loss are returned, otherwise
    the final parameters are.
    """
    state = T.AdamState.for_params(params.arrays())
    log = TrainLog()
    best = params.copy()
    batches = dataset.batches(rng)

    def validate(k):
        vrng = np.random.default_rng(val_rng_seed)
        refs = [collect_batch_stats(params, b) for b in dataset.reference_batches(vrng, schedule.val_stat_batches)]
        v = validation_loss(params, averaged_stats(refs), *validation)
        log.val.append((k, v))
        if v < log.best_val:
            log.best_val, log.best_iteration = v, k
            nonlocal best
            best = params.copy()
        return v

    for k in range(1, schedule.iterations + 1):
        lr = schedule.lr_at(k)
        batch_lr, batch_hr = next(batches)
        loss = train_step(params, state, batch_lr, batch_hr, lr)
        log.loss.append(loss)
        log.lr.append(lr)
        if validation is not None and (k % schedule.val_every == 0 or k == schedule.iterations):
            v = validate(k)
            if log_fn:
                log_fn(f"update {k}: loss {loss:.6g} val {v:.6g} lr {lr:.3g}")
    if validation is None:
        best = params.copy()
        log.best_iteration = schedule.iterations
    return best, log


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MCSR"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sHHHHHd")


class FormatError(ValueError):
    """Raised for malformed binary files."""


def checkpoint_bytes(params: ModelParams) -> bytes:
    cfg = params.config
    parts = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, cfg.depth, cfg.channels,
                          cfg.kernel, cfg.image_channels, cfg.bn_eps)]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in params.arrays()]
    return b"".join(parts)


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: too short for a checkpoint header")
    magic, version, depth, channels, kernel, ic, eps = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    cfg = NetworkConfig(depth, channels, kernel, ic, float(eps))
    off = _HEADER.size
    weights, bn = [], []

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        if off + 4 * n > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        a = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)
        off += 4 * n
        return a

    for l, shape in enumerate(cfg.layer_shapes()):
        weights.append(take(shape))
        if l < depth - 1:
            gamma, beta = take((channels,)), take((channels,))
            bn.append(BnLayerParams(gamma, beta, cfg.bn_eps))
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return ModelParams(cfg, weights, bn)
