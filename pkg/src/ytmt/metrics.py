"""PSNR and single-scale SSIM."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .errors import DimensionError

PSNR_CAP = 100.0


def _as_array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def psnr(x, y, peak: float = 1.0) -> float:
    """10 log10(peak^2 / MSE); identical inputs report ``PSNR_CAP``."""
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _to_gray(a: np.ndarray) -> np.ndarray:
    if a.ndim == 3:
        return a.mean(axis=0)
    if a.ndim == 2:
        return a
    raise DimensionError(f"ssim expects (C, H, W) or (H, W), got {a.shape}")


def ssim(x, y, peak: float = 1.0, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows of the channel-mean images.

    Batched inputs (N, C, H, W) return the mean of the per-image values.
    """
    a, b = _as_array(x), _as_array(y)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 4:
        return float(np.mean([ssim(ai, bi, peak, window, sigma) for ai, bi in zip(a, b)]))
    a, b = _to_gray(a), _to_gray(b)
    if a.shape[0] < window or a.shape[1] < window:
        raise DimensionError(f"ssim needs images of at least {window}x{window}, got {a.shape}")
    w = gaussian_window(window, sigma)
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2

    def filt(img):
        return convolve2d(img, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)  # (image_id, psnr_T, ssim_T, psnr_R, ssim_R)

    columns = ("image_id", "psnr_T", "ssim_T", "psnr_R", "ssim_R")

    def add(self, image_id, psnr_t, ssim_t, psnr_r, ssim_r) -> None:
        self.rows.append((image_id, psnr_t, ssim_t, psnr_r, ssim_r))

    def mean(self, column: str) -> float:
        idx = self.columns.index(column)
        return float(np.mean([r[idx] for r in self.rows])) if self.rows else float("nan")

    def summary(self) -> dict:
        return {c: self.mean(c) for c in self.columns[1:]}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(self.columns)
            for row in self.rows:
                out.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        report = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                report.add(row[0], *(float(v) for v in row[1:]))
        return report


def evaluate_pairs(I: np.ndarray, T: np.ndarray, R: np.ndarray, That: np.ndarray, Rhat=None,
                   ids=None) -> MetricsReport:
    """Per-image metrics; predictions are clipped to [0, 1].

    When ``Rhat`` is None the reflection estimate is taken as I - T_hat.
    """
    That = np.clip(_as_array(That), 0.0, 1.0)
    Rhat = _as_array(I) - That if Rhat is None else np.clip(_as_array(Rhat), 0.0, 1.0)
    report = MetricsReport()
    for k in range(len(That)):
        image_id = ids[k] if ids is not None else f"{k:04d}"
        report.add(image_id, psnr(That[k], T[k]), ssim(That[k], T[k]), psnr(Rhat[k], R[k]), ssim(Rhat[k], R[k]))
    return report
