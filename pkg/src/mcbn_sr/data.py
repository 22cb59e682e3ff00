"""Image I/O, bicubic degradation, patch sampling and augmentation.

Planes are float arrays in [0, 1]: ``(H, W)`` for a single channel or
``(C, H, W)`` when a leading channel axis is present. RGB images loaded from
disk are ``(H, W, 3)``; :func:`rgb_to_ycbcr` and friends work on that layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------

CUBIC_A = -0.5


def cubic_kernel(x, a: float = CUBIC_A):
    """Keys cubic convolution kernel; a = -0.5 is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(in_size: int, out_size: int, a: float = CUBIC_A) -> np.ndarray:
    """Dense (out_size, in_size) resampling matrix for one axis.

    Half-pixel centres, edge clamping, and a kernel widened by 1/scale when
    minifying (anti-aliasing). Each row sums to one.
    """
    if in_size < 1 or out_size < 1:
        raise ValueError(f"sizes must be >= 1, got in={in_size} out={out_size}")
    scale = out_size / in_size
    kscale = min(scale, 1.0)
    support = 2.0 / kscale
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    lo = np.floor(centers - support).astype(int)
    taps = int(math.ceil(2 * support)) + 2
    idx = lo[:, None] + np.arange(taps)[None, :]
    w = cubic_kernel((centers[:, None] - idx) * kscale, a)
    w /= w.sum(axis=1, keepdims=True)
    m = np.zeros((out_size, in_size))
    rows = np.repeat(np.arange(out_size), taps)
    np.add.at(m, (rows, np.clip(idx, 0, in_size - 1).ravel()), w.ravel())
    return m


def bicubic_resize(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Separable bicubic resize of the last two axes, clamped to [0, 1]."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be at least 1x1, got {out_w}x{out_h}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[-2:]
    wy = resize_weights(h, out_h)
    wx = resize_weights(w, out_w)
    out = np.matmul(np.matmul(wy, img), wx.T)
    return np.clip(out, 0.0, 1.0)


def crop_to_multiple(img: np.ndarray, s: int) -> np.ndarray:
    """Trim bottom/right so both spatial dims are divisible by ``s``."""
    h, w = img.shape[-2:]
    return img[..., : h - h % s, : w - w % s]


def make_interpolated_lr(hr: np.ndarray, s: int) -> np.ndarray:
    """Bicubic down by ``s`` then back up to the HR grid."""
    if s < 1:
        raise ValueError(f"scale must be >= 1, got {s}")
    hr = np.asarray(hr, dtype=np.float64)
    if s == 1:
        return hr.copy()
    h, w = hr.shape[-2:]
    if h % s or w % s:
        raise ValueError(f"image size {w}x{h} is not divisible by scale {s}; crop_to_multiple first")
    lr = bicubic_resize(hr, w // s, h // s)
    return bicubic_resize(lr, w, h)


# ---------------------------------------------------------------------------
# colour
# ---------------------------------------------------------------------------

# ITU-R BT.601, full range (the JPEG convention): Y in [0, 1], chroma centred on 0.5
_RGB_TO_YCC = np.array([
    [0.299, 0.587, 0.114],
    [-0.168735892, -0.331264108, 0.5],
    [0.5, -0.418687589, -0.081312411],
])
_YCC_TO_RGB = np.linalg.inv(_RGB_TO_YCC)


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    ycc = np.asarray(rgb, dtype=np.float64) @ _RGB_TO_YCC.T
    ycc[..., 1:] += 0.5
    return ycc


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    ycc = np.array(ycc, dtype=np.float64)
    ycc[..., 1:] -= 0.5
    return np.clip(ycc @ _YCC_TO_RGB.T, 0.0, 1.0)


def rgb_to_y(rgb: np.ndarray) -> np.ndarray:
    """Luma plane of an (H, W, 3) image; grayscale (H, W) input passes through."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        return rgb.copy()
    return np.clip(rgb @ _RGB_TO_YCC[0], 0.0, 1.0)


def y_to_rgb_merge(y: np.ndarray, cb: np.ndarray, cr: np.ndarray) -> np.ndarray:
    """Recombine a luma plane with (already upscaled) chroma planes."""
    if not (y.shape == cb.shape == cr.shape):
        raise ValueError(f"plane shapes differ: {y.shape}, {cb.shape}, {cr.shape}")
    return ycbcr_to_rgb(np.stack([y, cb, cr], axis=-1))


# ---------------------------------------------------------------------------
# cropping, patches, augmentation
# ---------------------------------------------------------------------------

def crop_boundary(img: np.ndarray, s: int) -> np.ndarray:
    """Drop ``s`` pixels from every side of the last two axes."""
    if s < 0:
        raise ValueError(f"crop must be >= 0, got {s}")
    if s == 0:
        return img
    h, w = img.shape[-2:]
    if 2 * s >= min(h, w):
        raise ValueError(f"cannot crop {s} pixels per side from a {w}x{h} image")
    return img[..., s:h - s, s:w - s]


@dataclass
class PatchPair:
    lr: np.ndarray
    hr: np.ndarray

    def __post_init__(self):
        if self.lr.shape != self.hr.shape:
            raise ValueError(f"LR/HR patch shapes differ: {self.lr.shape} vs {self.hr.shape}")


def patch_hw(n) -> tuple[int, int]:
    """Patch size as (height, width); an int means a square patch."""
    if isinstance(n, (int, np.integer)):
        return int(n), int(n)
    nh, nw = n
    return int(nh), int(nw)


def random_corners(h: int, w: int, n, count: int, rng: np.random.Generator) -> np.ndarray:
    nh, nw = patch_hw(n)
    if h < nh or w < nw:
        raise ValueError(f"image {w}x{h} is smaller than patch size {nw}x{nh}")
    ys = rng.integers(0, h - nh + 1, size=count)
    xs = rng.integers(0, w - nw + 1, size=count)
    return np.stack([ys, xs], axis=1)


def extract_patch_pairs(hr: np.ndarray, lr: np.ndarray, n: int, count: int,
                        rng: np.random.Generator) -> list[PatchPair]:
    """``count`` aligned ``n x n`` crops at uniformly random top-left corners."""
    if hr.shape != lr.shape:
        raise ValueError(f"HR/LR shapes differ: {hr.shape} vs {lr.shape}")
    corners = random_corners(*hr.shape[-2:], n, count, rng)
    return [PatchPair(lr[..., y:y + n, x:x + n], hr[..., y:y + n, x:x + n]) for y, x in corners]


def apply_transforms(a: np.ndarray, hflip: bool, vflip: bool, rot90: bool) -> np.ndarray:
    """Horizontal flip, then vertical flip, then a 90 degree rotation."""
    if hflip:
        a = a[..., ::-1]
    if vflip:
        a = a[..., ::-1, :]
    if rot90:
        a = np.rot90(a, 1, axes=(-2, -1))
    return a


def invert_transforms(a: np.ndarray, hflip: bool, vflip: bool, rot90: bool) -> np.ndarray:
    if rot90:
        a = np.rot90(a, -1, axes=(-2, -1))
    if vflip:
        a = a[..., ::-1, :]
    if hflip:
        a = a[..., ::-1]
    return a


def augment(pair: PatchPair, rng) -> PatchPair:
    """Three independent fair coins choose hflip, vflip and rot90; both planes get the same ones."""
    coins = np.asarray(rng.random(3)) < 0.5
    flags = tuple(bool(c) for c in coins)
    return PatchPair(apply_transforms(pair.lr, *flags), apply_transforms(pair.hr, *flags))


def high_variance_patches(hr: np.ndarray, lr: np.ndarray, n: int, k: int,
                          stride: int | None = None) -> list[PatchPair]:
    """The ``k`` crops of HR luminance with the highest variance, on a grid of step ``stride``."""
    stride = stride or max(1, n // 2)
    h, w = hr.shape[-2:]
    luma = hr if hr.ndim == 2 else hr.mean(axis=0)
    scored = []
    for y in range(0, h - n + 1, stride):
        for x in range(0, w - n + 1, stride):
            scored.append((-float(np.var(luma[y:y + n, x:x + n])), y, x))
    scored.sort()
    return [PatchPair(lr[..., y:y + n, x:x + n], hr[..., y:y + n, x:x + n]) for _, y, x in scored[:k]]


def _as_chw(img: np.ndarray) -> np.ndarray:
    return img[None] if img.ndim == 2 else img


def stack_batch(planes) -> np.ndarray:
    """Stack (H, W) or (C, H, W) planes into a float32 NCHW batch."""
    return np.ascontiguousarray(np.stack([_as_chw(p) for p in planes]), dtype=np.float32)


class InsufficientPatchesError(ValueError):
    pass


def sample_stats_batches(images, count: int, batch: int, n, rng: np.random.Generator,
                         patches_per_image: int | None = None) -> list[np.ndarray]:
    """Pooled random crops split into ``count`` batches of ``batch`` patches.

    ``n`` is a square size or an (h, w) pair. Every image contributes
    ``patches_per_image`` random crops
    (by default just enough to fill ``count`` batches); the pool is shuffled
    and cut into consecutive batches. Per-image crops use generators spawned
    from ``rng`` so the result does not depend on visiting order.
    """
    if count < 1 or batch < 1:
        raise ValueError(f"need count >= 1 and batch >= 1, got {count}, {batch}")
    nh, nw = patch_hw(n)
    usable = [img for img in images if img.shape[-2] >= nh and img.shape[-1] >= nw]
    needed = count * batch
    if not usable:
        raise InsufficientPatchesError(
            f"no training image is at least {nw}x{nh}; {needed} patches are required"
        )
    ppi = patches_per_image or -(-needed // len(usable))
    available = ppi * len(usable)
    if available < needed:
        raise InsufficientPatchesError(
            f"{count} batches of {batch} need {needed} patches but only {available} are available "
            f"({len(usable)} images x {ppi} patches); raise patches_per_image to at least "
            f"{-(-needed // len(usable))}"
        )
    children = rng.spawn(len(usable))
    pool = []
    for img, child in zip(usable, children):
        for y, x in random_corners(*img.shape[-2:], n, ppi, child):
            pool.append(img[..., y:y + nh, x:x + nw])
    order = rng.permutation(len(pool))[:needed]
    return [stack_batch([pool[i] for i in order[t * batch:(t + 1) * batch]]) for t in range(count)]


class PatchDataset:
    """Training pairs sampled the same way for every batch update.

    One update draws ``batch`` aligned patches from a single image; an epoch
    visits every image once in a random order.
    """

    def __init__(self, hr_images, scale: int, patch: int, batch: int, augment: bool = True):
        self.scale = scale
        self.patch = patch
        self.batch = batch
        self.augment = augment
        self.hr = [crop_to_multiple(np.asarray(im, dtype=np.float64), scale) for im in hr_images]
        self.lr = [make_interpolated_lr(im, scale) for im in self.hr]
        if not self.hr:
            raise ValueError("training set is empty")
        for im in self.hr:
            if min(im.shape[-2:]) < patch:
                raise ValueError(f"training image {im.shape[-2:]} is smaller than patch size {patch}")

    def __len__(self):
        return len(self.hr)

    def batches(self, rng: np.random.Generator):
        while True:
            for i in rng.permutation(len(self.hr)):
                pairs = extract_patch_pairs(self.hr[i], self.lr[i], self.patch, self.batch, rng)
                if self.augment:
                    pairs = [augment(p, rng) for p in pairs]
                yield stack_batch(p.lr for p in pairs), stack_batch(p.hr for p in pairs)

    def reference_batches(self, rng: np.random.Generator, count: int) -> list[np.ndarray]:
        return sample_stats_batches(self.lr, count, self.batch, self.patch, rng)


def validation_patches(hr_images, scale: int, n: int, k: int):
    """Stacked (lr, hr) batches of the top-``k`` variance crops from each image."""
    lrs, hrs = [], []
    for im in hr_images:
        hr = crop_to_multiple(np.asarray(im, dtype=np.float64), scale)
        lr = make_interpolated_lr(hr, scale)
        for p in high_variance_patches(hr, lr, n, k):
            lrs.append(p.lr)
            hrs.append(p.hr)
    if not lrs:
        raise ValueError("no validation patches could be extracted")
    return stack_batch(lrs), stack_batch(hrs)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def load_png(path) -> np.ndarray:
    """8-bit PNG to floats in [0, 1]; grayscale gives (H, W), colour (H, W, 3)."""
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I", "1"):
            arr = np.asarray(im.convert("L"), dtype=np.float64)
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and round half up onto 0..255."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(img: np.ndarray, path) -> None:
    arr = to_uint8(img)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise ValueError(f"expected (H, W) or (H, W, 3) image, got shape {arr.shape}")
    Image.fromarray(arr).save(path, format="PNG")


def read_manifest(path) -> list[str]:
    """Relative image paths, one per line; blank lines and '#' comments skipped."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(line)
    return out


def write_manifest(paths, path, header: str | None = None) -> None:
    lines = [f"# {header}"] if header else []
    Path(path).write_text("\n".join(lines + [str(p) for p in paths]) + "\n")


def list_images(directory, manifest=None) -> list[Path]:
    """PNG files of a directory, from ``manifest`` (relative to it) or sorted by name."""
    directory = Path(directory)
    if manifest is not None:
        return [directory / p for p in read_manifest(manifest)]
    default = directory / "manifest.txt"
    if default.exists():
        return [directory / p for p in read_manifest(default)]
    return sorted(directory.glob("*.png"))


# ---------------------------------------------------------------------------
# synthetic content
# ---------------------------------------------------------------------------

def synthetic_image(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """A textured (H, W) plane in [0, 1]: smooth shading, gratings and many sharp-edged shapes."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = 0.5 + 0.15 * np.sin(2 * np.pi * (xx * rng.uniform(-1, 1) + yy * rng.uniform(-1, 1)) / max(h, w))
    for _ in range(3):
        f = rng.uniform(0.2, 1.2)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.02, 0.06) * np.sin(f * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    for _ in range(int(rng.integers(20, 40))):
        level = rng.uniform(0.0, 1.0)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(2, max(3.0, max(h, w) / 6))
        u = rng.random()
        if u < 0.4:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        elif u < 0.8:
            theta = rng.uniform(0, np.pi)
            a = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
            b = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
            mask = (np.abs(a) < r) & (np.abs(b) < r * rng.uniform(0.2, 1.0))
        else:
            theta = rng.uniform(0, np.pi)
            d = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
            mask = (np.abs(d) < rng.uniform(0.5, 2.0)) & ((yy - cy) ** 2 + (xx - cx) ** 2 < 4 * r * r)
        img = np.where(mask, 0.3 * img + 0.7 * level, img)
    return np.clip(img, 0.0, 1.0)
