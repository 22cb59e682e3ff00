"""Monte Carlo batch-norm sampling.

Two routes to the same predictive samples:

* fast: batch statistics are collected once from T random training batches
  (:func:`estimate_stats_sets`), then the test image is replicated T times and
  each copy is normalised with its own stats set in a single forward pass
  (:func:`mc_infer_fast`);
* naive: for every sample the test image is pushed through the network
  together with a fresh training batch whose statistics drive each BN layer
  (:func:`mc_infer_naive`).

Given the same batch draws the two agree to float32 rounding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data
from .network import FormatError, ModelParams, collect_batch_stats, forward_eval, forward_with_reference
from .tensor import ShapeError


@dataclass
class StatsSets:
    """Per BN layer, T rows of per-channel batch means and variances."""

    means: list[np.ndarray]
    variances: list[np.ndarray]

    def __post_init__(self):
        if len(self.means) != len(self.variances) or not self.means:
            raise ShapeError("means and variances need the same, non-zero number of layers")
        t = self.means[0].shape[0]
        for l, (m, v) in enumerate(zip(self.means, self.variances)):
            if m.ndim != 2 or m.shape != v.shape or m.shape[0] != t:
                raise ShapeError(f"layer {l + 1}: expected matching (T={t}, C) arrays, got {m.shape} and {v.shape}")
            if np.any(v < 0):
                raise ValueError(f"layer {l + 1}: negative variance in stats set")

    @property
    def T(self) -> int:
        return self.means[0].shape[0]

    @property
    def layers(self) -> int:
        return len(self.means)

    def channels(self) -> list[int]:
        return [m.shape[1] for m in self.means]

    def subset(self, rows) -> "StatsSets":
        """Stats sets picked (or reordered) by row index."""
        rows = np.asarray(rows)
        return StatsSets([m[rows] for m in self.means], [v[rows] for v in self.variances])

    def head(self, t: int) -> "StatsSets":
        if not 1 <= t <= self.T:
            raise ValueError(f"requested {t} stats sets but only {self.T} are available")
        return self.subset(np.arange(t))

    def record(self, t: int):
        """Stats set ``t`` as a fixed-mode record for :func:`forward_eval`."""
        return [(m[t], v[t]) for m, v in zip(self.means, self.variances)]

    def per_sample(self):
        return list(zip(self.means, self.variances))

    def equals(self, other: "StatsSets") -> bool:
        return self.layers == other.layers and all(
            np.array_equal(a, b) for a, b in zip(self.means + self.variances, other.means + other.variances)
        )

    @classmethod
    def from_records(cls, records) -> "StatsSets":
        means = [np.stack([rec[l][0] for rec in records]) for l in range(len(records[0]))]
        variances = [np.stack([rec[l][1] for rec in records]) for l in range(len(records[0]))]
        return cls(means, variances)


@dataclass
class McOutput:
    samples: np.ndarray       # (T, ..., H, W)
    mean_image: np.ndarray
    variance_map: np.ndarray

    @property
    def T(self) -> int:
        return self.samples.shape[0]


def aggregate(samples) -> McOutput:
    """Per-pixel arithmetic mean and population variance over the sample axis."""
    s = np.asarray(samples, dtype=np.float64)
    mean = s.mean(axis=0)
    var = np.square(s - mean).mean(axis=0)
    return McOutput(s, mean, var)


def _network_input(params: ModelParams, image: np.ndarray) -> np.ndarray:
    chw = image[None] if image.ndim == 2 else image
    if chw.shape[0] != params.config.image_channels:
        raise ShapeError(
            f"image has {chw.shape[0]} channel(s), network expects {params.config.image_channels}"
        )
    return np.ascontiguousarray(chw[None], dtype=np.float32)


def _planes(out: np.ndarray, image_ndim: int) -> np.ndarray:
    return out[:, 0] if image_ndim == 2 else out


def estimate_stats_sets(params: ModelParams, training_images, T: int, batch: int, patch,
                        rng: np.random.Generator, patches_per_image: int | None = None) -> StatsSets:
    """Record every BN layer's batch statistics over T random training batches.

    ``training_images`` are network-input planes (interpolated LR). Patches are
    cropped from every image, pooled, shuffled and cut into batches of
    ``batch``; each batch gives one stats set.
    """
    batches = data.sample_stats_batches(training_images, T, batch, patch, rng, patches_per_image)
    return StatsSets.from_records([collect_batch_stats(params, b) for b in batches])


def mc_infer_fast(params: ModelParams, lr_image: np.ndarray, stats: StatsSets,
                  T_use: int | None = None, clip: bool = True) -> McOutput:
    """T MC samples of one interpolated-LR image from a single forward pass."""
    T_use = stats.T if T_use is None else T_use
    if T_use < 1:
        raise ValueError(f"T_use must be >= 1, got {T_use}")
    if T_use > stats.T:
        raise ValueError(f"T_use={T_use} exceeds the {stats.T} available stats sets")
    if stats.layers != params.bn_layers:
        raise ShapeError(f"stats cover {stats.layers} BN layers, network has {params.bn_layers}")
    x = _network_input(params, lr_image)
    batch = np.repeat(x, T_use, axis=0)
    out = forward_eval(params, batch, stats.head(T_use).per_sample(), mode="per_sample")
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return aggregate(_planes(out, lr_image.ndim))


def mc_infer_sequential(params: ModelParams, lr_image: np.ndarray, stats: StatsSets,
                        T_use: int | None = None, clip: bool = True) -> McOutput:
    """Same samples as :func:`mc_infer_fast`, one fixed-stats pass per stats set."""
    T_use = stats.T if T_use is None else T_use
    x = _network_input(params, lr_image)
    outs = []
    for t in range(T_use):
        o = forward_eval(params, x, stats.record(t), mode="fixed")
        outs.append(np.clip(o, 0.0, 1.0) if clip else o)
    return aggregate(_planes(np.concatenate(outs), lr_image.ndim))


def mc_infer_naive(params: ModelParams, lr_image: np.ndarray, training_images, T: int, batch: int,
                   rng: np.random.Generator, patch=None, patches_per_image: int | None = None,
                   clip: bool = True) -> McOutput:
    """Conventional MCBN: each sample runs the test image with a new training batch.

    BN statistics are taken from the training members only. ``patch`` defaults
    to the test image's own size so the image and the batch stack into one
    forward pass. Draws the same batches as :func:`estimate_stats_sets` does
    for an identically seeded ``rng`` and the same ``patch``.
    """
    x = _network_input(params, lr_image)
    patch = x.shape[-2:] if patch is None else patch
    batches = data.sample_stats_batches(training_images, T, batch, patch, rng, patches_per_image)
    outs = []
    for b in batches:
        o, _ = forward_with_reference(params, b, x)
        outs.append(np.clip(o, 0.0, 1.0) if clip else o)
    return aggregate(_planes(np.concatenate(outs), lr_image.ndim))


# ---------------------------------------------------------------------------
# visualisation and full-image reconstruction
# ---------------------------------------------------------------------------

COLORMAP_SIZE = 256


def colormap_lut(name: str = "viridis") -> np.ndarray:
    """(256, 3) RGB lookup table of a matplotlib colormap."""
    from matplotlib import colormaps

    try:
        cmap = colormaps[name]
    except KeyError:
        raise ValueError(f"unknown colormap {name!r}") from None
    return cmap(np.linspace(0.0, 1.0, COLORMAP_SIZE))[:, :3]


def render_uncertainty_map(variance_map: np.ndarray, colormap_name: str = "viridis"):
    """Min-max normalise a variance map and colour it.

    Returns ``(rgb, (vmin, vmax))``; a constant map maps to the first colour.
    """
    v = np.asarray(variance_map, dtype=np.float64)
    vmin, vmax = float(v.min()), float(v.max())
    span = vmax - vmin
    norm = (v - vmin) / span if span > 0 else np.zeros_like(v)
    idx = np.floor(norm * (COLORMAP_SIZE - 1) + 0.5).astype(int)
    return colormap_lut(colormap_name)[idx], (vmin, vmax)


def write_norm_sidecar(path, vmin: float, vmax: float, colormap_name: str = "viridis") -> None:
    Path(path).write_text(f"colormap = {colormap_name}\nmin = {vmin!r}\nmax = {vmax!r}\n")


def read_norm_sidecar(path) -> tuple[float, float]:
    vals = {}
    for line in Path(path).read_text().splitlines():
        k, _, v = line.partition("=")
        vals[k.strip()] = v.strip()
    return float(vals["min"]), float(vals["max"])


def reconstruct_full(params: ModelParams, lr_image: np.ndarray, stats: StatsSets, T: int,
                     scale: int, crop: int = 0, clip: bool = True):
    """Super-resolve a low-resolution image by ``scale``.

    Grayscale (H, W) and colour (H, W, 3) inputs are accepted. For a luma
    network, Y goes through :func:`mc_infer_fast` and chroma is bicubic
    upscaled. Returns ``(sr_image, variance_map, mc_output)`` with ``crop``
    pixels removed from every side of both images.
    """
    lr_image = np.asarray(lr_image, dtype=np.float64)
    if lr_image.ndim == 2 and params.config.image_channels == 3:
        lr_image = np.repeat(lr_image[..., None], 3, axis=-1)
    h, w = lr_image.shape[:2]
    H, W = h * scale, w * scale
    if lr_image.ndim == 2:
        mc = mc_infer_fast(params, data.bicubic_resize(lr_image, W, H), stats, T, clip)
        sr, var = mc.mean_image, mc.variance_map
    elif params.config.image_channels == 3:
        interp = data.bicubic_resize(np.moveaxis(lr_image, -1, 0), W, H)
        mc = mc_infer_fast(params, interp, stats, T, clip)
        sr = np.moveaxis(mc.mean_image, 0, -1)
        var = mc.variance_map.mean(axis=0)
    else:
        ycc = data.rgb_to_ycbcr(lr_image)
        up = data.bicubic_resize(np.moveaxis(ycc, -1, 0), W, H)
        mc = mc_infer_fast(params, up[0], stats, T, clip)
        sr = data.y_to_rgb_merge(mc.mean_image, up[1], up[2])
        var = mc.variance_map
    if crop:
        sr = sr[crop:H - crop, crop:W - crop]
        var = data.crop_boundary(var, crop)
    return sr, var, mc


# ---------------------------------------------------------------------------
# binary files
# ---------------------------------------------------------------------------

STATS_MAGIC = b"MCBN"
STATS_VERSION = 1
_STATS_HEADER = struct.Struct("<4sHHH")

VARIANCE_MAGIC = b"VARM"
_VARIANCE_HEADER = struct.Struct("<4sII")


def stats_bytes(stats: StatsSets) -> bytes:
    if stats.T > 0xFFFF or stats.layers > 0xFFFF:
        raise ValueError("stats file fields are 16-bit; too many layers or sets")
    parts = [_STATS_HEADER.pack(STATS_MAGIC, STATS_VERSION, stats.layers, stats.T)]
    for m, v in zip(stats.means, stats.variances):
        parts.append(struct.pack("<H", m.shape[1]))
        parts.append(np.ascontiguousarray(m, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return b"".join(parts)


def save_stats(stats: StatsSets, path) -> None:
    Path(path).write_bytes(stats_bytes(stats))


def load_stats(path) -> StatsSets:
    buf = Path(path).read_bytes()
    if len(buf) < _STATS_HEADER.size:
        raise FormatError(f"{path}: too short for a stats header")
    magic, version, layers, t = _STATS_HEADER.unpack_from(buf)
    if magic != STATS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {STATS_MAGIC!r}")
    if version != STATS_VERSION:
        raise FormatError(f"{path}: unsupported stats version {version}")
    off = _STATS_HEADER.size
    means, variances = [], []
    for _ in range(layers):
        if off + 2 > len(buf):
            raise FormatError(f"{path}: truncated stats file")
        (c,) = struct.unpack_from("<H", buf, off)
        off += 2
        n = t * c
        if off + 8 * n > len(buf):
            raise FormatError(f"{path}: truncated stats file")
        means.append(np.frombuffer(buf, "<f4", n, off).reshape(t, c).astype(np.float32))
        off += 4 * n
        variances.append(np.frombuffer(buf, "<f4", n, off).reshape(t, c).astype(np.float32))
        off += 4 * n
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return StatsSets(means, variances)


def save_variance_grid(variance_map: np.ndarray, path) -> None:
    v = np.asarray(variance_map)
    if v.ndim != 2:
        raise ValueError(f"variance grid must be 2-D, got shape {v.shape}")
    h, w = v.shape
    Path(path).write_bytes(_VARIANCE_HEADER.pack(VARIANCE_MAGIC, w, h)
                           + np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_variance_grid(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _VARIANCE_HEADER.size:
        raise FormatError(f"{path}: too short for a variance header")
    magic, w, h = _VARIANCE_HEADER.unpack_from(buf)
    if magic != VARIANCE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {VARIANCE_MAGIC!r}")
    if len(buf) != _VARIANCE_HEADER.size + 4 * w * h:
        raise FormatError(f"{path}: expected {w}x{h} floats")
    return np.frombuffer(buf, "<f4", w * h, _VARIANCE_HEADER.size).reshape(h, w).astype(np.float32)
