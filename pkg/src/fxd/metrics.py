"""Evaluation metrics: PSNR, SSIM and the Frechet distance between Gaussian feature fits."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .losses import masked_ssim

log = logging.getLogger(__name__)

PSNR_CAP = 99.0


def psnr(a, b, mask=None) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if not m.any():
            raise ValueError("psnr: mask selects no pixels")
        a, b = a[m], b[m]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * np.log10(mse))


def ssim(a, b, mask=None) -> float:
    with torch.no_grad():
        return float(masked_ssim(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), mask))


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.cov, dtype=np.float64)
        d = len(self.mean)
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match mean dim {d}")
        if np.abs(cov - cov.T).max(initial=0.0) > 1e-9:
            raise ValueError("covariance is not symmetric")
        self.cov = 0.5 * (cov + cov.T)

    @classmethod
    def from_features(cls, feats, ridge: float = 1e-6) -> "FeatureStats":
        x = np.asarray(feats, dtype=np.float64)
        n, d = x.shape
        cov = np.cov(x, rowvar=False).reshape(d, d) if n > 1 else np.zeros((d, d))
        if n <= d:
            log.warning("only %d samples for %d features; regularizing covariance", n, d)
            cov = cov + ridge * np.eye(d)
        return cls(x.mean(0), cov)

    def shifted(self, new_mean) -> "FeatureStats":
        return FeatureStats(new_mean, self.cov)


def _psd_sqrt(m: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min(initial=0.0) < -tol * max(1.0, abs(w).max(initial=0.0)):
        raise ValueError(f"matrix is not PSD (min eigenvalue {w.min():.3e})")
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(s1: FeatureStats, s2: FeatureStats) -> float:
    """Squared mean distance plus ``Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)``."""
    if s1.mean.shape != s2.mean.shape:
        raise ValueError(f"dimension mismatch {s1.mean.shape} vs {s2.mean.shape}")
    mean_term = float(np.sum((s1.mean - s2.mean) ** 2))
    c1, c2 = s1.cov, s2.cov
    if not (np.count_nonzero(c1 - np.diag(np.diag(c1))) or np.count_nonzero(c2 - np.diag(np.diag(c2)))):
        d1, d2 = np.diag(c1), np.diag(c2)
        if min(d1.min(initial=0), d2.min(initial=0)) < -1e-9:
            raise ValueError("covariance is not PSD")
        d1, d2 = np.clip(d1, 0, None), np.clip(d2, 0, None)
        return max(0.0, mean_term + float(np.sum(d1 + d2 - 2 * np.sqrt(d1 * d2))))
    r1 = _psd_sqrt(c1)
    _psd_sqrt(c2)  # PSD check
    cross = _psd_sqrt(r1 @ c2 @ r1, tol=1e-6)
    return max(0.0, mean_term + float(np.trace(c1) + np.trace(c2) - 2 * np.trace(cross)))


def image_features(images, size: int = 8) -> np.ndarray:
    """Flattened ``size`` x ``size`` area-downsampled grayscale, one row per image."""
    out = []
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        gray = img @ np.array([0.299, 0.587, 0.114]) if img.ndim == 3 else img
        t = torch.as_tensor(gray)[None, None]
        small = torch.nn.functional.adaptive_avg_pool2d(t, size)
        out.append(small.reshape(-1).numpy())
    return np.stack(out)


@dataclass
class MeanShiftReport:
    fid_shifted: float
    fid_realigned: float
    fid_gt_split: float

    @property
    def passed(self) -> bool:
        return self.fid_realigned < self.fid_gt_split

    def to_dict(self) -> dict:
        return {"fid_shifted": self.fid_shifted, "fid_realigned": self.fid_realigned,
                "fid_gt_split": self.fid_gt_split, "passed": self.passed}


def fid_mean_shift_demo(gt_a, gt_b, shifted) -> MeanShiftReport:
    """Show that moving the shifted set's mean onto GT split A lowers FID below a GT/GT split.

    Inputs are feature matrices (n_samples, d).
    """
    sa = FeatureStats.from_features(gt_a)
    sb = FeatureStats.from_features(gt_b)
    ss = FeatureStats.from_features(shifted)
    return MeanShiftReport(fid(sa, ss), fid(sa, ss.shifted(sa.mean)), fid(sa, sb))
