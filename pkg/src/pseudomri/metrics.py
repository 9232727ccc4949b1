"""Image-quality and volume-continuity metrics: PSNR, SSIM, region SSIM on edge maps,
adjacent-slice correlation and Sobel difference maps."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy import ndimage, signal
from skimage import feature, filters

from .data import RegionSpec, Volume

SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5
DEFAULT_PEAK = 2.0  # data range of images normalized to [-1, 1]


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = DEFAULT_PEAK) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical images."""
    a, b = _pair(a, b)
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def gaussian_window(size: int, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim_map(a, b, window: int = SSIM_WINDOW, k1: float = SSIM_K1, k2: float = SSIM_K2,
             peak: float = DEFAULT_PEAK, sigma: float = SSIM_SIGMA) -> np.ndarray:
    a, b = _pair(a, b)
    if window % 2 == 0 or window < 1:
        raise ValueError("SSIM window must be a positive odd integer")
    if window > min(a.shape[-2:]):
        raise ValueError(f"SSIM window {window} larger than image {a.shape}")
    k = gaussian_window(window, sigma)
    filt = lambda x: signal.convolve2d(x, k, mode="valid")
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))


def ssim(a, b, window: int = SSIM_WINDOW, k1: float = SSIM_K1, k2: float = SSIM_K2,
         peak: float = DEFAULT_PEAK) -> float:
    """Mean structural similarity over the valid region of a Gaussian-weighted window."""
    return float(ssim_map(a, b, window, k1, k2, peak).mean())


def canny_edges(img, sigma: float = 3.0, low: float = 0.1, high: float = 0.2) -> np.ndarray:
    """Binary Canny edges; hysteresis thresholds are fractions of the max gradient magnitude."""
    img = np.asarray(img, dtype=np.float64)
    smoothed = filters.gaussian(img, sigma=sigma, mode="nearest", preserve_range=True)
    magnitude = np.hypot(ndimage.sobel(smoothed, axis=0), ndimage.sobel(smoothed, axis=1))
    peak = magnitude.max()
    if peak <= 0:
        return np.zeros(img.shape, dtype=bool)
    return feature.canny(img, sigma=sigma, low_threshold=low * peak, high_threshold=high * peak, mode="nearest")


def rssim(a, b, region: Optional[RegionSpec] = None, canny_sigma: float = 3.0, low: float = 0.1,
          high: float = 0.2, window: int = SSIM_WINDOW) -> float:
    """SSIM of the Canny edge maps of ``a`` and ``b`` inside ``region`` (whole image if None)."""
    a, b = _pair(a, b)
    ea = canny_edges(a, canny_sigma, low, high).astype(np.float64)
    eb = canny_edges(b, canny_sigma, low, high).astype(np.float64)
    if region is not None:
        ea, eb = region.crop(ea), region.crop(eb)
    side = min(ea.shape)
    window = min(window, side if side % 2 else side - 1)
    return ssim(ea, eb, window=max(window, 1), peak=1.0)


def pearson(a, b) -> float:
    """Pearson correlation; identical inputs score exactly 1, a constant against anything else 0."""
    a, b = _pair(a, b)
    if np.array_equal(a, b):
        return 1.0
    a, b = a.ravel() - a.mean(), b.ravel() - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def adjacent_slice_correlation(vol) -> float:
    slices = vol.slices if isinstance(vol, Volume) else np.asarray(vol)
    if slices.shape[0] < 2:
        raise ValueError("adjacent-slice correlation needs at least two slices")
    vals = []
    for k in range(slices.shape[0] - 1):
        a, b = slices[k], slices[k + 1]
        if np.ptp(a) == 0 and np.ptp(b) == 0:
            vals.append(1.0 if np.array_equal(a, b) else 0.0)
        else:
            vals.append(pearson(a, b))
    return float(np.mean(vals))


def sobel_magnitude(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return np.hypot(ndimage.sobel(img, axis=0, mode="nearest"), ndimage.sobel(img, axis=1, mode="nearest"))


def sobel_difference_map(a, b) -> np.ndarray:
    """``|sobel(a)| - |sobel(b)|`` in absolute value, scaled to [0, 1] by its maximum."""
    a, b = _pair(a, b)
    diff = np.abs(sobel_magnitude(a) - sobel_magnitude(b))
    m = diff.max()
    return diff / m if m > 0 else diff


def save_png(img, path, lo: float = None, hi: float = None) -> None:
    """8-bit grayscale PNG; values are mapped linearly from ``[lo, hi]`` (default: data range)."""
    img = np.asarray(img, dtype=np.float64)
    lo = img.min() if lo is None else lo
    hi = img.max() if hi is None else hi
    scaled = np.zeros_like(img) if hi == lo else (np.clip(img, lo, hi) - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else repr(float(x))


@dataclass
class EvalReport:
    psnr: np.ndarray
    ssim: np.ndarray
    rssim: np.ndarray
    corr_pred: float
    corr_gt: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not len(self.psnr) == len(self.ssim) == len(self.rssim):
            raise ValueError("per-slice metric arrays must share length")

    @property
    def medians(self) -> dict:
        return {k: float(np.median(getattr(self, k))) for k in ("psnr", "ssim", "rssim")}

    @property
    def means(self) -> dict:
        return {k: float(np.mean(getattr(self, k))) for k in ("psnr", "ssim", "rssim")}

    COLUMNS = ("slice", "psnr_db", "ssim", "rssim")

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for k in range(len(self.psnr)):
            w.writerow([k, _fmt(self.psnr[k]), _fmt(self.ssim[k]), _fmt(self.rssim[k])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def summary(self) -> dict:
        return {"median": self.medians, "mean": self.means, "adjacent_corr_pred": self.corr_pred,
                "adjacent_corr_gt": self.corr_gt, **self.metadata}


def evaluate_volumes(pred, gt, region: Optional[RegionSpec] = None, peak: float = DEFAULT_PEAK,
                     metadata: Optional[dict] = None) -> EvalReport:
    p = pred.slices if isinstance(pred, Volume) else np.asarray(pred)
    g = gt.slices if isinstance(gt, Volume) else np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"volume mismatch: {p.shape} vs {g.shape}")
    ps = np.array([psnr(a, b, peak) for a, b in zip(p, g)])
    ss = np.array([ssim(a, b, peak=peak) for a, b in zip(p, g)])
    rs = np.array([rssim(a, b, region) for a, b in zip(p, g)])
    return EvalReport(ps, ss, rs, adjacent_slice_correlation(p), adjacent_slice_correlation(g), dict(metadata or {}))
