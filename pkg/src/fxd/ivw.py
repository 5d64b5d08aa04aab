"""Inverse view warping: supervise a displaced camera with an in-path image.

Every pixel of the in-path view is lifted with a dense depth map, a ray is
cast to that point from the out-of-path camera, the ray is blended using
only primitives behind ``beta`` times the point's depth, and the result is
written back at the source pixel. The rearranged image is then directly
comparable with the in-path ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .rasterizer import NEAR_PLANE, T_MIN, RaySample, render_rays
from .scene import CameraView, DepthMap


@dataclass
class WarpMap:
    """Per source pixel (H, W): lifted world point, ray and reference depth in the target view."""

    v_in: CameraView
    v_out: CameraView
    points: np.ndarray  # (H, W, 3) world
    directions: np.ndarray  # (H, W, 3) unit, from v_out's center
    d0: np.ndarray  # (H, W) camera-frame depth in v_out
    screen: np.ndarray  # (H, W, 2) continuous screen position in v_out
    in_frustum: np.ndarray  # (H, W) point in front of v_out's near plane
    source_valid: np.ndarray  # (H, W)

    @property
    def usable(self) -> np.ndarray:
        return self.source_valid & self.in_frustum

    def ray(self, v: int, u: int) -> RaySample:
        return RaySample(self.v_out.center, self.directions[v, u], float(self.d0[v, u]))

    def in_bounds(self) -> np.ndarray:
        """Rays landing inside v_out's image (out-of-bound rays are still used)."""
        s = self.screen
        return (self.usable & (s[..., 0] >= -0.5) & (s[..., 0] < self.v_out.width - 0.5)
                & (s[..., 1] >= -0.5) & (s[..., 1] < self.v_out.height - 0.5))


def build_warp_map(v_in: CameraView, v_out: CameraView, depth: DepthMap, near: float = NEAR_PLANE) -> WarpMap:
    """Lift each pixel of ``v_in`` with ``depth`` and describe its ray from ``v_out``."""
    if depth.shape != v_in.shape:
        raise ValueError(f"depth shape {depth.shape} does not match view {v_in.shape}")
    u, v = v_in.pixel_grid()
    valid = depth.valid.copy()
    pts = v_in.unproject(u, v, np.where(valid, depth.depth, 1.0))
    pc = v_out.world_to_camera(pts)
    d0 = pc[..., 2]
    in_frustum = valid & (d0 > near)
    safe = np.where(in_frustum, d0, 1.0)
    screen = np.stack([v_out.fx * pc[..., 0] / safe + v_out.cx, v_out.fy * pc[..., 1] / safe + v_out.cy], -1)
    ray = pts - v_out.center
    dirs = ray / np.maximum(np.linalg.norm(ray, axis=-1, keepdims=True), 1e-12)
    return WarpMap(v_in, v_out, pts, dirs, np.where(in_frustum, d0, np.nan), screen, in_frustum, valid)


@dataclass
class PseudoGT:
    """Rearranged out-of-path render, indexed by source pixel, with its supervision mask."""

    image: torch.Tensor  # (H, W, 3), differentiable w.r.t. the scene
    mask: np.ndarray  # (H, W)

    def numpy(self) -> np.ndarray:
        return self.image.detach().cpu().numpy().astype(np.float64)


def render_pseudo_gt(scene, warp: WarpMap, t_out: float | None = None, beta: float = 0.95,
                     background=(0.0, 0.0, 0.0)) -> PseudoGT:
    """Occlusion-aware render of every usable warp ray, written back at its source pixel."""
    from .rasterizer import as_tensors

    st = as_tensors(scene)
    t_out = warp.v_in.timestamp if t_out is None else t_out
    h, w = warp.v_in.shape
    usable = warp.usable
    idx = np.flatnonzero(usable)
    image = torch.zeros(h * w, 3, dtype=st.dtype)
    mask = np.zeros(h * w, dtype=bool)
    if len(idx):
        qxy = warp.screen.reshape(-1, 2)[idx]
        d0 = warp.d0.reshape(-1)[idx]
        color, weight = render_rays(st, warp.v_out, qxy, d0, t_out, beta, background)
        hit = (weight.detach() >= T_MIN).cpu().numpy()
        image = image.index_put((torch.from_numpy(idx),), color)
        mask[idx] = hit
    return PseudoGT(image.reshape(h, w, 3), mask.reshape(h, w))
