"""Depth bootstrapping: accumulate LiDAR, select reliable sparse depth, rectify rendered depth.

The rectifier is a scikit-learn style regressor mapping rendered depth to
LiDAR depth with a global affine map fitted by relative-error weighted
least squares.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .scene import CameraView, DepthMap, SceneGraph
from .validation import check_depth_pairs

log = logging.getLogger(__name__)


class DegenerateFit(ValueError):
    """The sparse samples cannot determine an affine map (or give a <= 0 scale)."""


@dataclass
class AccumulatedPoints:
    points: np.ndarray  # (M, 3) world frame, compensated to the reference frame
    times: np.ndarray  # (M,) per-point timestamps
    object_ids: np.ndarray  # (M,) -1 for static


@dataclass
class SparseDepthMap:
    """At most one LiDAR sample per pixel; pixel centers are integer coordinates."""

    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    times: np.ndarray
    view: CameraView | None = None

    def __len__(self) -> int:
        return len(self.depth)

    def dense(self, shape) -> np.ndarray:
        out = np.full(shape, np.nan)
        out[self.v, self.u] = self.depth
        return out

    def to_points(self) -> AccumulatedPoints:
        """World points that re-project to exactly these samples."""
        pts = self.view.unproject(self.u, self.v, self.depth).reshape(-1, 3)
        return AccumulatedPoints(pts, self.times.copy(), np.full(len(self), -1))

    def to_rows(self) -> np.ndarray:
        return np.stack([self.u, self.v, self.depth, self.times], 1)


def accumulate_lidar(scene: SceneGraph, t: int, n_frames: int) -> AccumulatedPoints:
    """Merge LiDAR frames ``[t, t + n_frames)`` into world points as seen at frame ``t``.

    Static points are mapped with their sensor poses; points tagged with a
    dynamic object are carried along with that object's box from their own
    timestamp to frame ``t``'s timestamp.
    """
    if n_frames < 1 or t < 0 or t + n_frames > len(scene.lidar):
        raise IndexError(f"LiDAR window [{t}, {t + n_frames}) outside 0..{len(scene.lidar)}")
    t_ref = scene.lidar[t].timestamp
    pts, times, oids = [], [], []
    for k in range(t, t + n_frames):
        fr = scene.lidar[k]
        wp = fr.world_points()
        for oi in np.unique(fr.object_ids[fr.object_ids >= 0]):
            sel = fr.object_ids == oi
            obj = scene.objects[oi]
            r_k, tr_k = obj.pose_at(fr.timestamp)
            r_t, tr_t = obj.pose_at(t_ref)
            local = (wp[sel] - tr_k) @ r_k
            wp[sel] = local @ r_t.T + tr_t
        pts.append(wp)
        times.append(fr.point_times)
        oids.append(fr.object_ids)
    return AccumulatedPoints(np.concatenate(pts), np.concatenate(times), np.concatenate(oids))


def project_points(points, view: CameraView, d_max: float = np.inf):
    """Integer pixel, depth and index of the points that land inside ``view``."""
    uv, z = view.project(points)
    with np.errstate(invalid="ignore"):
        u = np.round(uv[:, 0])
        v = np.round(uv[:, 1])
        ok = (z > 0) & (z <= d_max) & (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
    idx = np.nonzero(ok)[0]
    return u[idx].astype(np.int64), v[idx].astype(np.int64), z[idx], idx


def select_sparse_depth(points, view: CameraView, rendered: DepthMap | None = None,
                        dev_threshold: float | None = 0.05, d_max: float = np.inf) -> SparseDepthMap:
    """Project points and keep at most one reliable sample per pixel.

    Applied in order: (1) drop points deviating from the rendered depth by
    more than ``dev_threshold`` of it (pixels without valid rendered depth are
    exempt; ``None`` disables the rule); (2) per pixel keep the earliest
    timestamp; (3) among equal timestamps keep the smallest depth.
    """
    if isinstance(points, SparseDepthMap):
        points = points.to_points()
    u, v, d, idx = project_points(points.points, view, d_max)
    tau = points.times[idx]
    if rendered is not None and dev_threshold is not None and len(d):
        r = rendered.depth[v, u]
        ok = rendered.valid[v, u]
        with np.errstate(invalid="ignore"):
            drop = ok & (np.abs(d - r) > dev_threshold * r)
        u, v, d, tau = u[~drop], v[~drop], d[~drop], tau[~drop]
    pix = v * view.width + u
    order = np.lexsort((d, tau, pix))
    pix, u, v, d, tau = pix[order], u[order], v[order], d[order], tau[order]
    first = np.r_[True, pix[1:] != pix[:-1]] if len(pix) else np.zeros(0, dtype=bool)
    return SparseDepthMap(u[first], v[first], d[first], tau[first], view)


def raw_sparse_depth(scene: SceneGraph, frame: int, view: CameraView, d_max: float = np.inf) -> SparseDepthMap:
    """Single-frame LiDAR projected into ``view`` (nearest return per pixel, no filtering)."""
    pts = accumulate_lidar(scene, frame, 1)
    u, v, d, idx = project_points(pts.points, view, d_max)
    pix = v * view.width + u
    order = np.lexsort((d, pix))
    pix = pix[order]
    first = np.r_[True, pix[1:] != pix[:-1]] if len(pix) else np.zeros(0, dtype=bool)
    o = order[first]
    return SparseDepthMap(u[o], v[o], d[o], pts.times[idx][o], view)


class DepthRectifier(RegressorMixin, BaseEstimator):
    """Affine map ``a * rendered + b`` fitted to sparse LiDAR depth.

    Minimizes ``sum(((a * r + b - s) / s) ** 2)``, the least-squares form of
    the relative residual, in closed form.
    """

    def __init__(self, min_samples: int = 2):
        self.min_samples = min_samples

    def fit(self, X, y):
        r, s = check_depth_pairs(X, y)
        if len(r) < max(2, self.min_samples):
            raise DegenerateFit(f"need at least {max(2, self.min_samples)} samples, got {len(r)}")
        if np.ptp(r) == 0:
            raise DegenerateFit("rendered depths have zero variance")
        w = 1.0 / s
        design = np.stack([r * w, w], 1)
        (a, b), *_ = np.linalg.lstsq(design, np.ones_like(s), rcond=None)
        if not a > 0:
            raise DegenerateFit(f"non-positive scale a={a:.4g}")
        self.a_ = float(a)
        self.b_ = float(b)
        self.n_samples_ = len(r)
        self.residual_ = float(np.mean(np.abs((a * r + b - s) / s)))
        return self

    def predict(self, X):
        check_is_fitted(self, ["a_", "b_"])
        return self.a_ * np.asarray(X, dtype=np.float64) + self.b_

    def objective(self, X, y, a=None, b=None) -> float:
        r, s = check_depth_pairs(X, y)
        a = self.a_ if a is None else a
        b = self.b_ if b is None else b
        return float(np.sum(((a * r + b - s) / s) ** 2))

    def to_dict(self) -> dict:
        check_is_fitted(self, ["a_", "b_"])
        return {"a": self.a_, "b": self.b_, "n_samples": self.n_samples_, "mean_rel_residual": self.residual_}


def fit_rectifier(sparse: SparseDepthMap, rendered: DepthMap) -> DepthRectifier:
    r = rendered.depth[sparse.v, sparse.u]
    ok = rendered.valid[sparse.v, sparse.u]
    return DepthRectifier().fit(r[ok], sparse.depth[ok])


def rectify(rendered: DepthMap, rectifier: DepthRectifier) -> DepthMap:
    out = np.where(rendered.valid, rectifier.predict(np.nan_to_num(rendered.depth)), np.nan)
    with np.errstate(invalid="ignore"):
        return DepthMap(out, rendered.valid & (out > 0))


@dataclass
class BootstrapConfig:
    n_frames: int = 30
    dev_threshold: float | None = 0.05
    d_max: float = 40.0


@dataclass
class BootstrapResult:
    targets: dict[int, DepthMap] = field(default_factory=dict)
    rectifiers: dict[int, DepthRectifier] = field(default_factory=dict)
    sparse: dict[int, SparseDepthMap] = field(default_factory=dict)


def bootstrap_view(scene: SceneGraph, view: CameraView, rendered: DepthMap, cfg: BootstrapConfig):
    """accumulate -> select -> fit -> rectify for one view.

    Returns (target, rectifier, sparse); target and rectifier are ``None``
    when the fit is degenerate.
    """
    n = min(cfg.n_frames, len(scene.lidar) - view.frame)
    pts = accumulate_lidar(scene, view.frame, n)
    sparse = select_sparse_depth(pts, view, rendered, cfg.dev_threshold, cfg.d_max)
    try:
        rect = fit_rectifier(sparse, rendered)
    except DegenerateFit as exc:
        log.warning("view %s/%d: %s; keeping the previous target", view.name, view.frame, exc)
        return None, None, sparse
    return rectify(rendered, rect), rect, sparse


def bootstrap_step(scene: SceneGraph, views: list[CameraView], cfg: BootstrapConfig,
                   rendered: dict[int, DepthMap] | None = None, lidar_scene: SceneGraph | None = None,
                   previous: BootstrapResult | None = None) -> BootstrapResult:
    """Rectified dense depth targets for every view, keyed by position in ``views``.

    ``scene`` is the field that renders depth; ``lidar_scene`` (default
    ``scene``) supplies LiDAR frames and object boxes.
    """
    from .rasterizer import render_depth

    lidar_scene = lidar_scene or scene
    out = BootstrapResult()
    for i, view in enumerate(views):
        d = rendered[i] if rendered is not None else render_depth(scene, view)
        target, rect, sparse = bootstrap_view(lidar_scene, view, d, cfg)
        out.sparse[i] = sparse
        if rect is None:
            if previous is not None and i in previous.targets:
                out.targets[i] = previous.targets[i]
                if i in previous.rectifiers:
                    out.rectifiers[i] = previous.rectifiers[i]
            else:
                out.targets[i] = DepthMap(np.full(d.shape, np.nan), np.zeros(d.shape, bool))
            continue
        out.targets[i] = target
        out.rectifiers[i] = rect
    return out
