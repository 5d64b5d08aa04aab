"""Training losses: masked L1 + SSIM color loss, near-range relative depth, far-range ranking.

Depth inputs follow one convention throughout: NaN marks an invalid pixel.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .scene import DepthMap

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    rgb: float = 1.0
    depth_near: float = 0.1
    depth_far: float = 0.05
    alpha_ssim: float = 0.2
    eps: float = 1e-3
    margin: float = 1e-4
    d_max: float = 40.0
    n_pairs: int = 1024

    def __post_init__(self):
        for name in ("rgb", "depth_near", "depth_far", "alpha_ssim", "eps", "margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if not self.d_max > 0:
            raise ValueError("d_max must be positive")


def _t(x, dtype=None):
    if isinstance(x, DepthMap):
        x = x.depth
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype or torch.float64)


def _gauss_window(dtype) -> torch.Tensor:
    x = torch.arange(SSIM_WINDOW, dtype=dtype) - SSIM_WINDOW // 2
    g = torch.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _blur(x: torch.Tensor) -> torch.Tensor:
    """Separable Gaussian blur of (C, H, W) with zero padding."""
    g = _gauss_window(x.dtype)
    c = x.shape[0]
    pad = SSIM_WINDOW // 2
    x = F.conv2d(x[None], g.view(1, 1, 1, -1).expand(c, 1, 1, -1), padding=(0, pad), groups=c)
    x = F.conv2d(x, g.view(1, 1, -1, 1).expand(c, 1, -1, 1), padding=(pad, 0), groups=c)
    return x[0]


def ssim_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-pixel SSIM of (H, W, C) images, averaged over channels -> (H, W)."""
    a = a.permute(2, 0, 1)
    b = b.permute(2, 0, 1)
    mu_a, mu_b = _blur(a), _blur(b)
    saa = _blur(a * a) - mu_a**2
    sbb = _blur(b * b) - mu_b**2
    sab = _blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (saa + sbb + SSIM_C2)
    return (num / den).mean(0)


def masked_ssim(a, b, mask=None) -> torch.Tensor:
    """Mean SSIM over ``mask``; masked-out pixels of ``a`` are replaced by ``b``."""
    a, b = _t(a), _t(b)
    b = b.to(a.dtype)
    if mask is None:
        return ssim_map(a, b).mean()
    m = _t(mask).bool()
    if not m.any():
        raise ValueError("empty mask")
    a = torch.where(m[..., None], a, b.detach())
    return ssim_map(a, b)[m].mean()


def masked_l1(a, b, mask=None) -> torch.Tensor:
    a, b = _t(a), _t(b)
    diff = (a - b.to(a.dtype)).abs()
    if mask is None:
        return diff.mean()
    m = _t(mask).bool()
    if not m.any():
        raise ValueError("empty mask")
    return diff[m].mean()


def rgb_loss(render_in, gt_in, pseudo_render_out=None, pseudo_gt_out=None, mask_out=None,
             alpha_ssim: float = 0.2, mask_in=None) -> torch.Tensor:
    """L1 plus weighted (1 - SSIM) over the in-path view and, if given, the pseudo ground truth."""
    loss = masked_l1(render_in, gt_in, mask_in)
    if alpha_ssim:
        loss = loss + alpha_ssim * (1 - masked_ssim(render_in, gt_in, mask_in))
    if pseudo_render_out is not None:
        m = None if mask_out is None else _t(mask_out).bool()
        if m is None or m.any():
            loss = loss + masked_l1(pseudo_render_out, pseudo_gt_out, m)
            if alpha_ssim:
                loss = loss + alpha_ssim * (1 - masked_ssim(pseudo_render_out, pseudo_gt_out, m))
    return loss


def depth_near_loss(d, d_hat, eps: float = 1e-3, d_max: float = 40.0) -> torch.Tensor:
    """Mean relative error ``|(d - d_hat) / (d_hat + eps)|`` over pixels with ``d < d_max``."""
    d = _t(d)
    d_hat = _t(d_hat, d.dtype)
    valid = torch.isfinite(d.detach()) & torch.isfinite(d_hat)
    valid &= d.detach() < d_max
    if not valid.any():
        log.warning("depth_near_loss: no near-range pixels")
        return d.new_zeros(()) + 0.0 * torch.nan_to_num(d).sum()
    return ((d[valid] - d_hat[valid]) / (d_hat[valid] + eps)).abs().mean()


def ranking_pairs(d_hat, d_max: float = 40.0, n_pairs: int = 1024, rng: np.random.Generator | None = None,
                  finite=None):
    """Sampled (nearer, farther) flat-index pairs over the far region of ``d_hat``.

    ``finite`` optionally restricts to pixels where the rendered depth exists.
    """
    h = np.asarray(d_hat.detach().cpu().numpy() if isinstance(d_hat, torch.Tensor) else d_hat, dtype=np.float64)
    far = np.isfinite(h) & (np.nan_to_num(h, nan=-np.inf) >= d_max)
    if finite is not None:
        far &= finite
    idx = np.flatnonzero(far.reshape(-1))
    if len(idx) < 2:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    rng = rng or np.random.default_rng(0)
    i = idx[rng.integers(0, len(idx), n_pairs)]
    j = idx[rng.integers(0, len(idx), n_pairs)]
    hf = h.reshape(-1)
    ordered = hf[i] != hf[j]
    near_first = hf[i] < hf[j]
    a = np.where(near_first, i, j)[ordered]
    b = np.where(near_first, j, i)[ordered]
    return a, b


def depth_far_ranking_loss(d, d_hat, d_max: float = 40.0, margin: float = 1e-4, n_pairs: int = 1024,
                           rng: np.random.Generator | None = None) -> torch.Tensor:
    """Pairwise hinge on the far region: for d_hat_i < d_hat_j penalize d_i > d_j - margin."""
    d = _t(d)
    d_hat = _t(d_hat, d.dtype)
    zero = d.new_zeros(()) + 0.0 * torch.nan_to_num(d).sum()
    a, b = ranking_pairs(d_hat, d_max, n_pairs, rng, torch.isfinite(d.detach()).numpy())
    if len(a) == 0:
        return zero
    df = d.reshape(-1)
    return torch.relu(df[a] - df[b] + margin).mean()


def total_loss(parts: dict, weights: LossWeights) -> torch.Tensor:
    """``rgb * L_rgb + depth_near * L_near + depth_far * L_far``; NaN parts raise."""
    lam = {"rgb": weights.rgb, "depth_near": weights.depth_near, "depth_far": weights.depth_far}
    total = None
    for name, value in parts.items():
        if name not in lam:
            raise KeyError(f"unknown loss part {name!r}")
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise FloatingPointError(f"loss part {name!r} is not finite ({v})")
        term = lam[name] * value
        total = term if total is None else total + term
    return torch.zeros((), dtype=torch.float64) if total is None else total
