"""Reconstruction quality (PSNR, SSIM) and uncertainty quality (PLL, CRPS).

The predictive distribution of each pixel is an independent Gaussian with the
MC mean and MC variance plus a small floor, so PLL and CRPS stay finite when
all samples agree.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

DEFAULT_VAR_FLOOR = 1e-8
PSNR_IDENTICAL = math.inf
UNDEFINED_CORRELATION = math.nan

_LOG_2PI = math.log(2 * math.pi)
_INV_SQRT_PI = 1 / math.sqrt(math.pi)


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs give ``PSNR_IDENTICAL`` (+inf)."""
    a, b = _same_shape(a, b)
    mse = float(np.mean(np.square(a - b)))
    if mse == 0:
        return PSNR_IDENTICAL
    return 10 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a, b, data_range: float = 1.0, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all fully-contained Gaussian windows of a 2-D plane."""
    a, b = _same_shape(a, b)
    if a.ndim != 2:
        raise ValueError(f"ssim expects a 2-D plane, got shape {a.shape}")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} is smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class PredictiveField:
    mu: np.ndarray
    sigma2: np.ndarray
    var_floor: float = DEFAULT_VAR_FLOOR

    def __post_init__(self):
        self.mu, self.sigma2 = _same_shape(self.mu, self.sigma2)
        if self.var_floor < 0 or np.any(self.sigma2 + self.var_floor <= 0):
            raise ValueError("sigma2 + var_floor must be positive everywhere")

    @property
    def variance(self) -> np.ndarray:
        return self.sigma2 + self.var_floor


def pll_map(field: PredictiveField, target) -> np.ndarray:
    mu, y = _same_shape(field.mu, target)
    v = field.variance
    return -0.5 * (_LOG_2PI + np.log(v)) - np.square(y - mu) / (2 * v)


def pll(field: PredictiveField, target) -> tuple[float, float]:
    """Gaussian log-density of ``target``: (sum over pixels, mean per pixel). Higher is better."""
    m = pll_map(field, target)
    return float(m.sum()), float(m.mean())


def crps_map(field: PredictiveField, target) -> np.ndarray:
    mu, y = _same_shape(field.mu, target)
    s = np.sqrt(field.variance)
    z = (y - mu) / s
    pdf = np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    return s * (z * (2 * ndtr(z) - 1) + 2 * pdf - _INV_SQRT_PI)


def crps(field: PredictiveField, target) -> float:
    """Pixel-averaged closed-form Gaussian CRPS. Lower is better, never negative."""
    return float(np.mean(crps_map(field, target)))


def crps_numeric(mu: float, sigma2: float, y: float, span: float = 10.0, steps_per_sigma: int = 2000) -> float:
    """CRPS of N(mu, sigma2) at ``y`` by trapezoid integration of (F - step)^2.

    The grid covers mu +- span*sigma (extended to reach ``y``) with spacing at
    most sigma/steps_per_sigma and a node exactly at ``y`` where the step jumps.
    """
    s = math.sqrt(sigma2)
    if s <= 0:
        raise ValueError("crps_numeric needs a positive variance")
    lo, hi = min(mu - span * s, y), max(mu + span * s, y)
    h = s / steps_per_sigma
    total = 0.0
    for a, b, above in ((lo, y, False), (y, hi, True)):
        if b <= a:
            continue
        n = int(math.ceil((b - a) / h))
        x = np.linspace(a, b, n + 1)
        f = ndtr((x - mu) / s)
        integrand = np.square(f - 1.0) if above else np.square(f)
        total += float(np.trapezoid(integrand, x))
    return total


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class ImageMetrics:
    image: str
    T: int
    psnr_db: float
    ssim: float
    pll_sum: float
    pll_per_pixel: float
    crps_mean: float
    mean_uncertainty: float
    time_s: float = 0.0


METRIC_COLUMNS = [f.name for f in fields(ImageMetrics)]


def score_image(name: str, mu, sigma2, target, T: int, var_floor: float = DEFAULT_VAR_FLOOR,
                time_s: float = 0.0) -> ImageMetrics:
    pf = PredictiveField(mu, sigma2, var_floor)
    pll_sum, pll_pp = pll(pf, target)
    return ImageMetrics(
        image=name, T=T,
        psnr_db=psnr(mu, target), ssim=ssim(mu, target),
        pll_sum=pll_sum, pll_per_pixel=pll_pp, crps_mean=crps(pf, target),
        mean_uncertainty=float(np.mean(sigma2)), time_s=time_s,
    )


@dataclass
class MetricsReport:
    rows: list[ImageMetrics] = field(default_factory=list)

    def aggregate(self) -> dict[str, float]:
        """Arithmetic mean of every numeric column, independent of row order."""
        rows = sorted(self.rows, key=lambda r: (r.T, r.image))
        out = {}
        for col in METRIC_COLUMNS[2:]:
            out[col] = math.fsum(getattr(r, col) for r in rows) / len(rows) if rows else math.nan
        return out

    def by_T(self) -> dict[int, "MetricsReport"]:
        groups: dict[int, MetricsReport] = {}
        for r in self.rows:
            groups.setdefault(r.T, MetricsReport()).rows.append(r)
        return dict(sorted(groups.items()))

    def write_csv(self, path, include_mean: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(v) for v in asdict(r).values()])
            if include_mean:
                for t, group in self.by_T().items():
                    agg = group.aggregate()
                    w.writerow(["mean", t] + [_fmt(agg[c]) for c in METRIC_COLUMNS[2:]])

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != METRIC_COLUMNS:
                raise ValueError(f"{path}: unexpected header {header}")
            for rec in reader:
                if rec[0] == "mean":
                    continue
                rows.append(ImageMetrics(rec[0], int(rec[1]), *(float(v) for v in rec[2:])))
        return cls(rows)


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _minmax(v: np.ndarray) -> np.ndarray:
    span = v.max() - v.min()
    return (v - v.min()) / span if span > 0 else np.zeros_like(v)


def correlation_report(rows: list[ImageMetrics]) -> dict:
    """Pearson correlation of mean uncertainty against PSNR, plus [0, 1]-scaled scatter points.

    Fewer than two points, or a constant coordinate, gives ``UNDEFINED_CORRELATION`` (NaN).
    """
    u = np.array([r.mean_uncertainty for r in rows], dtype=np.float64)
    p = np.array([r.psnr_db for r in rows], dtype=np.float64)
    scatter = np.stack([_minmax(u), _minmax(p)], axis=1) if rows else np.empty((0, 2))
    r = UNDEFINED_CORRELATION
    if len(rows) >= 2 and np.all(np.isfinite(p)):
        du, dp = u - u.mean(), p - p.mean()
        denom = math.sqrt(float(np.sum(du * du)) * float(np.sum(dp * dp)))
        if denom > 0:
            r = float(np.sum(du * dp)) / denom
    return {"pearson": r, "scatter": scatter}


def write_scatter(scatter: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mean_uncertainty", "psnr_db"])
        for u, p in scatter:
            w.writerow([repr(float(u)), repr(float(p))])
