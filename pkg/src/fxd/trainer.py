"""Three-stage optimization of a Gaussian driving scene.

Stage 1 warms up a LiDAR-initialized field on in-path images and raw
single-frame LiDAR depth. Stage 2 switches depth supervision to the
bootstrapped (rectified) dense targets and densifies. Stage 3 adds one random
out-of-path view per iteration, supervised through inverse view warping.
"""

from __future__ import annotations

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from .bootstrap import BootstrapConfig, BootstrapResult, bootstrap_step, raw_sparse_depth
from .dynamics import box_unconstrain
from .ivw import build_warp_map, render_pseudo_gt
from .losses import (LossWeights, depth_far_ranking_loss, depth_near_loss, ranking_pairs, rgb_loss,
                     total_loss)
from .metrics import psnr, ssim
from .rasterizer import SceneTensors, render, render_color, render_depth
from .scene import CameraView, DepthMap, GaussianField, SceneGraph
from .synth import Dataset

log = logging.getLogger(__name__)

LR_SCALE = {
    "means": 1.0,
    "quats": 0.4,
    "log_scales": 2.0,
    "opacity_logits": 20.0,
    "colors": 4.0,
    "color_taylor": 1.0,
    "pose_rot": 0.1,
    "pose_trans": 0.4,
}


@dataclass
class DensifyConfig:
    interval: int = 100
    grad_threshold: float = 2e-4
    min_opacity: float = 0.01
    max_primitives: int = 40000
    jitter: float = 0.5

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("densify interval must be >= 1")


@dataclass
class TrainConfig:
    stage_iters: tuple[int, int, int] = (500, 1500, 1000)
    lr: float = 2.5e-3
    lr_scale: dict = field(default_factory=lambda: dict(LR_SCALE))
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    bootstrap_every_epochs: int = 2
    accumulation_frames: int = 30
    dev_threshold: float | None = 0.05
    beta_occ: float = 0.95
    oop_lateral: float = 2.0
    oop_vertical: float = 0.5
    ivw: bool = True
    bootstrap: bool = True
    raw_depth_with_bootstrap: bool = False
    init_voxel: float = 0.35
    init_opacity: float = 0.3
    init_scale: float = 0.5
    far_points: int = 800
    far_scale_px: float = 1.5
    eval_every: int = 100
    seed: int = 0
    deterministic: bool = True
    dtype: str = "float32"
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.densify, dict):
            self.densify = DensifyConfig(**self.densify)
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        self.stage_iters = tuple(int(n) for n in self.stage_iters)
        if len(self.stage_iters) != 3 or min(self.stage_iters) < 0:
            raise ValueError("stage_iters must be three non-negative counts")
        if not 0.0 <= self.beta_occ <= 1.0:
            raise ValueError("beta_occ must lie in [0, 1]")
        if self.bootstrap_every_epochs < 1:
            raise ValueError("bootstrap interval must be >= 1 epoch")
        unknown = set(self.lr_scale) - set(LR_SCALE)
        if unknown:
            raise ValueError(f"unknown lr_scale keys {sorted(unknown)}")
        self.lr_scale = {**LR_SCALE, **self.lr_scale}

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


# --- out-of-path sampling ------------------------------------------------------


def path_axes(views: list[CameraView], view: CameraView) -> np.ndarray:
    """Columns (forward, left, up) of the path frame at ``view``.

    Forward follows the trajectory of cameras sharing ``view``'s name; with a
    single frame it falls back to the camera's horizontal viewing direction.
    """
    track = sorted((v for v in views if v.name == view.name), key=lambda v: v.frame)
    fwd = None
    if len(track) > 1:
        k = next(i for i, v in enumerate(track) if v.frame == view.frame)
        a, b = track[max(k - 1, 0)], track[min(k + 1, len(track) - 1)]
        fwd = b.center - a.center
    if fwd is None or np.linalg.norm(fwd[:2]) < 1e-9:
        fwd = view.rotation[2]
    fwd = np.array([fwd[0], fwd[1], 0.0])
    if np.linalg.norm(fwd) < 1e-9:
        fwd = np.array([1.0, 0.0, 0.0])
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    return np.stack([fwd, np.cross(up, fwd), up], 1)


def sample_out_of_path(v_in: CameraView, box, rng: np.random.Generator, axes: np.ndarray | None = None) -> CameraView:
    """``v_in`` translated by a uniform offset in a path-aligned box.

    ``box`` holds half-extents (forward, lateral, vertical) in meters.
    Orientation and timestamp are unchanged.
    """
    box = np.asarray(box, dtype=np.float64)
    if box.shape != (3,) or (box < 0).any():
        raise ValueError("box must be three non-negative half-extents")
    axes = path_axes([v_in], v_in) if axes is None else axes
    local = rng.uniform(-1.0, 1.0, 3) * box
    return v_in.translated(axes @ local, name=f"{v_in.name}~oop", role="virtual")


# --- initialization --------------------------------------------------------------


def _voxel_first(points: np.ndarray, size: float) -> np.ndarray:
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    keys = np.floor(points / size).astype(np.int64)
    _, idx = np.unique(keys, axis=0, return_index=True)
    return np.sort(idx)


def _sample_colors(points_fn, views, images) -> np.ndarray:
    """Color of each point from the first training view that sees it."""
    colors = None
    for view, img in zip(views, images):
        pts = points_fn(view.timestamp)
        if colors is None:
            colors = np.full((len(pts), 3), np.nan)
        todo = np.isnan(colors[:, 0])
        if not todo.any():
            break
        uv, z = view.project(pts[todo])
        with np.errstate(invalid="ignore"):
            u, v = np.round(uv[:, 0]), np.round(uv[:, 1])
            ok = (z > 0.2) & (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
        idx = np.flatnonzero(todo)[ok]
        colors[idx] = img[v[ok].astype(int), u[ok].astype(int)]
    if colors is None:
        return np.zeros((0, 3))
    return np.where(np.isnan(colors), 0.5, colors)


def _nn_scale(points: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if len(points) < 2:
        return np.full(len(points), lo)
    k = min(4, len(points))
    d, _ = cKDTree(points).query(points, k=k)
    return np.clip(d[:, 1:].mean(1), lo, hi)


def initialize_field(sensor: SceneGraph, views: list[CameraView], images, cfg: TrainConfig,
                     rng: np.random.Generator) -> GaussianField:
    """Primitives seeded from multi-frame LiDAR plus a sparse shell beyond LiDAR range."""
    static, dyn = [], {k: [] for k in range(len(sensor.objects))}
    for fr in sensor.lidar:
        wp = fr.world_points()
        static.append(wp[fr.object_ids < 0])
        for k in dyn:
            sel = fr.object_ids == k
            if sel.any():
                r, tr = sensor.objects[k].pose_at(fr.timestamp)
                dyn[k].append((wp[sel] - tr) @ r)
    fields_ = []
    pts = np.concatenate(static) if static else np.zeros((0, 3))
    pts = pts[_voxel_first(pts, cfg.init_voxel)]
    far = []
    d_max = cfg.loss.d_max
    for _ in range(cfg.far_points if views else 0):
        v = views[rng.integers(len(views))]
        u, w = rng.uniform(0, v.width - 1), rng.uniform(0, v.height * 0.6)
        far.append(v.unproject(u, w, rng.uniform(d_max, 2 * d_max)).reshape(3))
    far = np.asarray(far).reshape(-1, 3)
    near_scale = cfg.init_scale * _nn_scale(pts, 0.05, 1.0)
    fx = views[0].fx if views else 1.0
    far_scale = np.array([np.linalg.norm(p - views[0].center) * cfg.far_scale_px / fx for p in far]) if len(far) else np.zeros(0)
    all_pts = np.concatenate([pts, far])
    colors = _sample_colors(lambda t: all_pts, views, images)
    scales = np.concatenate([near_scale, far_scale])
    fields_.append(GaussianField.create(all_pts, np.repeat(scales[:, None], 3, 1), cfg.init_opacity, colors))
    for k, chunks in dyn.items():
        if not chunks:
            continue
        obj = sensor.objects[k]
        local = np.concatenate(chunks)
        local = local[_voxel_first(local, cfg.init_voxel * 0.5)]
        half = obj.dims / 2
        local = np.clip(local, -0.95 * half, 0.95 * half)
        logistic = box_unconstrain(local, obj.dims)

        def world_at(t, local=local, obj=obj):
            r, tr = obj.pose_at(t)
            return local @ r.T + tr

        colors = _sample_colors(world_at, views, images)
        sc = cfg.init_scale * _nn_scale(local, 0.03, 0.5)
        fields_.append(GaussianField.create(logistic, np.repeat(sc[:, None], 3, 1), cfg.init_opacity, colors,
                                            object_index=np.full(len(local), k)))
    return GaussianField.concat(fields_)


# --- gradients -----------------------------------------------------------------------


@dataclass
class GradientSet:
    """Partials of the total loss for every primitive parameter and pose track."""

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    color_taylor: np.ndarray
    pose_rot: list[np.ndarray]
    pose_trans: list[np.ndarray]
    object_index: np.ndarray

    @property
    def logistic(self) -> np.ndarray:
        """Gradients w.r.t. the logistic coordinates of dynamic members."""
        return self.means[self.object_index >= 0]

    def primitive_norm(self) -> np.ndarray:
        parts = [self.means, self.quats, self.log_scales, self.opacity_logits[:, None], self.colors,
                 self.color_taylor.reshape(len(self.means), -1)]
        return np.sqrt(sum((p**2).sum(1) for p in parts))


def view_loss(st: SceneTensors, view: CameraView, image, depth: DepthMap | None, weights: LossWeights,
              background=(0.0, 0.0, 0.0), rng=None):
    """Total loss of one in-path view: color plus (optional) near and far depth terms."""
    res = render(st, view, background=background)
    parts = {"rgb": rgb_loss(res.color, image, alpha_ssim=weights.alpha_ssim)}
    if depth is not None:
        d_hat = _near_target(depth, weights.d_max)
        parts["depth_near"] = depth_near_loss(res.depth, d_hat, weights.eps, weights.d_max)
        parts["depth_far"] = depth_far_ranking_loss(res.depth, depth.depth, weights.d_max, weights.margin,
                                                    weights.n_pairs, rng or np.random.default_rng(0))
    return total_loss(parts, weights), parts, res


def _near_target(depth: DepthMap, d_max: float) -> np.ndarray:
    d = depth.depth
    with np.errstate(invalid="ignore"):
        return np.where(depth.valid & (d < d_max), d, np.nan)


def backward(scene: SceneGraph, views: list[CameraView], targets: list[dict], weights: LossWeights | None = None,
             background=(0.0, 0.0, 0.0), dtype=torch.float64) -> GradientSet:
    """Gradient of the summed per-view loss w.r.t. every scene parameter.

    ``targets[i]`` holds ``image`` (H, W, 3) and optionally ``depth`` (DepthMap).
    Raises FloatingPointError naming the view and primitive on a non-finite partial.
    """
    weights = weights or LossWeights()
    st = SceneTensors(scene, dtype=dtype, requires_grad=True)
    leaves = st.leaves()
    total = [torch.zeros_like(p) for p in leaves]
    for view, tgt in zip(views, targets):
        loss, _, _ = view_loss(st, view, tgt["image"], tgt.get("depth"), weights, background)
        grads = torch.autograd.grad(loss, leaves, allow_unused=True)
        for k, g in enumerate(grads):
            if g is None:
                continue
            if not torch.isfinite(g).all():
                bad = torch.nonzero(~torch.isfinite(g.reshape(g.shape[0], -1)).all(1)).flatten()
                raise FloatingPointError(
                    f"non-finite gradient for primitive {int(bad[0])} in view {view.name}/{view.frame}")
            total[k] = total[k] + g
    n = len(SceneTensors.PARAM_NAMES)
    arr = [t.detach().cpu().numpy().astype(np.float64) for t in total]
    n_obj = len(scene.objects)
    return GradientSet(*arr[:n], arr[n:n + n_obj], arr[n + n_obj:], scene.field.object_index.copy())


def finite_difference_check(scene: SceneGraph, view: CameraView, target: dict, n_samples: int = 200,
                            weights: LossWeights | None = None, h_rel: float = 1e-4, seed: int = 0,
                            floor: float = 1e-7, max_redraw: int = 20):
    """Compare autograd partials with central differences at random parameters (float64).

    The loss is piecewise smooth: footprint cutoffs, depth ordering, the
    depth validity threshold, L1 signs and the ranking hinge all switch
    discretely. A sample whose ±h perturbation crosses any of these is
    redrawn. Returns (relative errors, analytic, numeric, redraw count).
    """
    from .rasterizer import _pairs, grid_points, project_field

    weights = weights or LossWeights()
    rng = np.random.default_rng(seed)
    grads = backward(scene, [view], [target], weights)
    st = SceneTensors(scene, dtype=torch.float64)
    names = [n for n in SceneTensors.PARAM_NAMES if st.params[n].numel()]

    def loss_now():
        with torch.no_grad():
            return float(view_loss(st, view, target["image"], target.get("depth"), weights)[0])

    image = np.asarray(target["image"], dtype=np.float64)
    depth = target.get("depth")

    def structure():
        """Signature of the smooth piece: pair sets plus every kink of the loss terms."""
        with torch.no_grad():
            proj = project_field(st, view, view.timestamp)
            qi, gi, _ = _pairs(proj, grid_points(view), None, 8, (view.width, view.height))
            res = render(st, view)
        parts = [qi.tobytes(), gi.tobytes(), np.signbit(res.image() - image).tobytes()]
        if depth is not None:
            d = res.depth.detach().cpu().numpy()
            valid = res.valid.cpu().numpy()
            near = _near_target(depth, weights.d_max)
            parts += [valid.tobytes(), np.signbit(np.nan_to_num(d - near)).tobytes(),
                      (np.nan_to_num(d, nan=np.inf) < weights.d_max).tobytes()]
            a, b = ranking_pairs(depth.depth, weights.d_max, weights.n_pairs, np.random.default_rng(0), valid)
            parts.append(((d.reshape(-1)[a] - d.reshape(-1)[b] + weights.margin) > 0).tobytes())
        return b"".join(parts)

    def at(name, idx, delta, fn):
        p = st.params[name]
        old = float(p[idx])
        with torch.no_grad():
            p[idx] = old + delta
        try:
            return fn()
        finally:
            with torch.no_grad():
                p[idx] = old

    ref = structure()
    errs, ana, num = [], [], []
    redraws = 0
    while len(errs) < n_samples:
        name = names[rng.integers(len(names))]
        p = st.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        h = h_rel * max(1.0, abs(float(p[idx])))
        if at(name, idx, h, structure) != ref or at(name, idx, -h, structure) != ref:
            redraws += 1
            if redraws > max_redraw * n_samples:
                raise RuntimeError("too many non-smooth samples")
            continue
        g_num = (at(name, idx, h, loss_now) - at(name, idx, -h, loss_now)) / (2 * h)
        g_ana = float(getattr(grads, name)[idx])
        errs.append(abs(g_ana - g_num) / max(abs(g_ana), abs(g_num), floor))
        ana.append(g_ana)
        num.append(g_num)
    return np.array(errs), np.array(ana), np.array(num), redraws


# --- densification ------------------------------------------------------------------


def densify_and_prune(scene: SceneGraph, grad_accum: np.ndarray, cfg: DensifyConfig, rng: np.random.Generator):
    """Clone primitives with mean positional gradient above threshold; drop near-transparent ones.

    Returns (new scene, kept indices into the old field, cloned indices into the old field).
    Clones are appended after the kept primitives, offset by a scale-proportional jitter.
    """
    f = scene.field
    grad_accum = np.asarray(grad_accum, dtype=np.float64)
    keep = np.flatnonzero(f.opacities >= cfg.min_opacity)
    clone = np.flatnonzero(grad_accum > cfg.grad_threshold)
    clone = clone[np.isin(clone, keep)]
    room = max(cfg.max_primitives - len(keep), 0)
    if len(clone) > room:
        clone = clone[np.argsort(-grad_accum[clone], kind="stable")[:room]]
        clone.sort()
    new = GaussianField.concat([f.subset(keep), f.subset(clone)])
    if len(clone):
        from .geometry import quat_to_matrix

        sub = f.subset(clone)
        eps = rng.normal(0, 1, (len(clone), 3)) * cfg.jitter
        r = quat_to_matrix(sub.quats.astype(np.float64))
        offset = np.einsum("nij,nj->ni", r, eps * sub.scales)
        static = sub.object_index < 0
        offset[~static] = eps[~static] * 0.05
        new.means[len(keep):] += offset.astype(np.float32)
    out = scene.copy()
    out.field = new
    return out, keep, clone


# --- trainer ----------------------------------------------------------------------------


class Trainer:
    """Optimization state for one dataset; stages run in order and the state can be forked."""

    def __init__(self, dataset: Dataset, config: TrainConfig | None = None, log_path=None):
        self.cfg = config or TrainConfig()
        self.dataset = dataset
        self.views = dataset.train_views()
        if not self.views:
            raise ValueError("dataset has no training views")
        self.images = [dataset.image(v) for v in self.views]
        self.background = dataset.background
        self.sensor = dataset.sensor_scene()
        self.rng = np.random.default_rng(self.cfg.seed)
        torch.manual_seed(self.cfg.seed)
        field_ = initialize_field(self.sensor, self.views, self.images, self.cfg, self.rng)
        scene = SceneGraph(field_, copy.deepcopy(self.sensor.objects), [], [], {}, self.sensor.t_ref)
        self._set_scene(scene)
        self._axes = [path_axes(self.views, v) for v in self.views]
        self._raw: dict[int, DepthMap] = {}
        self.boot: BootstrapResult | None = None
        self.iteration = 0
        self.stage_iteration = {1: 0, 2: 0, 3: 0}
        self.records: list[dict] = []
        self.log_path = Path(log_path) if log_path else None
        self._gt = [torch.as_tensor(img, dtype=self.cfg.torch_dtype) for img in self.images]

    # state -----------------------------------------------------------------

    def _set_scene(self, scene: SceneGraph, old: tuple | None = None):
        """Install a scene; ``old`` = (keep, clone) carries optimizer moments across densification."""
        cfg = self.cfg
        prev_st = getattr(self, "st", None)
        prev_opt = getattr(self, "opt", None)
        self.st = SceneTensors(scene, dtype=cfg.torch_dtype, requires_grad=True)
        groups = [{"params": [self.st.params[n]], "lr": cfg.lr * cfg.lr_scale[n], "name": n}
                  for n in SceneTensors.PARAM_NAMES]
        if self.st.pose_rot:
            groups.append({"params": self.st.pose_rot, "lr": cfg.lr * cfg.lr_scale["pose_rot"], "name": "pose_rot"})
            groups.append({"params": self.st.pose_trans, "lr": cfg.lr * cfg.lr_scale["pose_trans"],
                           "name": "pose_trans"})
        self.opt = torch.optim.Adam(groups, lr=cfg.lr, betas=cfg.adam_betas, eps=cfg.adam_eps)
        if prev_opt is not None and old is not None:
            keep, clone = (torch.from_numpy(np.asarray(a, dtype=np.int64)) for a in old)
            for n in SceneTensors.PARAM_NAMES:
                st_old = prev_opt.state.get(prev_st.params[n])
                if not st_old:
                    continue
                new_state = {}
                for key, val in st_old.items():
                    if key == "step":
                        new_state[key] = val.clone()
                    else:
                        new_state[key] = torch.cat([val[keep], val[clone]])
                self.opt.state[self.st.params[n]] = new_state
            for old_p, new_p in zip(prev_st.pose_rot + prev_st.pose_trans, self.st.pose_rot + self.st.pose_trans):
                if old_p in prev_opt.state:
                    self.opt.state[new_p] = {k: v.clone() for k, v in prev_opt.state[old_p].items()}
        n = len(self.st)
        self.grad_accum = np.zeros(n)
        self.grad_count = np.zeros(n)

    def scene(self) -> SceneGraph:
        return self.st.to_scene()

    def fork(self, **overrides) -> "Trainer":
        """Deep copy of the full state (field, optimizer moments, RNG) with config overrides."""
        other = copy.copy(self)
        other.cfg = copy.deepcopy(self.cfg)
        for k, v in overrides.items():
            if not hasattr(other.cfg, k):
                raise AttributeError(f"unknown config field {k!r}")
            setattr(other.cfg, k, v)
        other.cfg.__post_init__()
        other.rng = copy.deepcopy(self.rng)
        other.records = list(self.records)
        other.stage_iteration = dict(self.stage_iteration)
        other.boot = copy.deepcopy(self.boot)
        other.st = None
        other.opt = None
        other._set_scene(self.st.to_scene())
        # carry optimizer moments over one-to-one
        n = len(self.st)
        for p_old, p_new in zip(self.st.leaves(), other.st.leaves()):
            if p_old in self.opt.state:
                other.opt.state[p_new] = {k: v.clone() for k, v in self.opt.state[p_old].items()}
        # restore parameters bit-exactly in the working dtype
        with torch.no_grad():
            for p_old, p_new in zip(self.st.leaves(), other.st.leaves()):
                p_new.copy_(p_old)
        other.grad_accum = self.grad_accum.copy()
        other.grad_count = self.grad_count.copy()
        assert len(other.st) == n
        return other

    # supervision -----------------------------------------------------------

    def raw_depth(self, i: int) -> DepthMap:
        if i not in self._raw:
            v = self.views[i]
            sp = raw_sparse_depth(self.sensor, v.frame, v, self.cfg.loss.d_max)
            self._raw[i] = DepthMap.from_array(sp.dense(v.shape))
        return self._raw[i]

    def uses_bootstrap(self, stage: int) -> bool:
        return self.cfg.bootstrap and stage >= 2

    def refresh_bootstrap(self):
        cfg = self.cfg
        with torch.no_grad():
            st = SceneTensors(self.st.to_scene(), dtype=cfg.torch_dtype)
            rendered = {i: render_depth(st, v) for i, v in enumerate(self.views)}
        bcfg = BootstrapConfig(cfg.accumulation_frames, cfg.dev_threshold, cfg.loss.d_max)
        self.boot = bootstrap_step(self.st.to_scene(), self.views, bcfg, rendered, self.sensor, self.boot)

    def depth_target(self, i: int, stage: int) -> DepthMap:
        if self.uses_bootstrap(stage) and self.boot is not None:
            return self.boot.targets[i]
        return self.raw_depth(i)

    # iteration -------------------------------------------------------------

    def step(self, stage: int) -> dict:
        cfg = self.cfg
        w = cfg.loss
        n_views = len(self.views)
        k = self.stage_iteration[stage]
        if self.uses_bootstrap(stage):
            since = self.stage_iteration[2] + (self.stage_iteration[3] if stage == 3 else 0)
            if self.boot is None or since % (cfg.bootstrap_every_epochs * n_views) == 0:
                self.refresh_bootstrap()
        i = int(self.rng.integers(n_views))
        view = self.views[i]
        gt = self._gt[i]
        res = render(self.st, view, background=self.background)
        res.projection.mean2d.retain_grad()
        depth = self.depth_target(i, stage)
        pseudo = None
        if stage == 3 and cfg.ivw:
            v_out = sample_out_of_path(view, (0.0, cfg.oop_lateral, cfg.oop_vertical), self.rng, self._axes[i])
            warp_depth = depth if self.uses_bootstrap(stage) else res.depth_map()
            warp = build_warp_map(view, v_out, warp_depth)
            pseudo = render_pseudo_gt(self.st, warp, beta=cfg.beta_occ, background=self.background)
        parts = {"rgb": rgb_loss(res.color, gt, None if pseudo is None else pseudo.image, gt,
                                 None if pseudo is None else pseudo.mask, w.alpha_ssim)}
        parts["depth_near"] = depth_near_loss(res.depth, _near_target(depth, w.d_max), w.eps, w.d_max)
        if self.uses_bootstrap(stage):
            parts["depth_far"] = depth_far_ranking_loss(res.depth, depth.depth, w.d_max, w.margin, w.n_pairs,
                                                        self.rng)
            if cfg.raw_depth_with_bootstrap:
                raw = self.raw_depth(i)
                parts["depth_near"] = parts["depth_near"] + depth_near_loss(
                    res.depth, _near_target(raw, w.d_max), w.eps, w.d_max)
        loss = total_loss(parts, w)
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        for leaf in self.st.leaves():
            if leaf.grad is not None and not torch.isfinite(leaf.grad).all():
                raise FloatingPointError(f"non-finite gradient at iteration {self.iteration} in view "
                                         f"{view.name}/{view.frame}")
        g2d = res.projection.mean2d.grad
        if g2d is not None:
            vis = res.projection.visible
            self.grad_accum[vis] += g2d.norm(dim=1).detach().cpu().numpy()[vis]
            self.grad_count[vis] += 1
        self.opt.step()
        self._renormalize()
        self.iteration += 1
        self.stage_iteration[stage] += 1
        rec = {"iter": self.iteration, "stage": stage, "loss": float(loss.detach()),
               **{key: float(v.detach()) if isinstance(v, torch.Tensor) else float(v) for key, v in parts.items()}}
        if pseudo is not None:
            rec["oop_mask"] = float(pseudo.mask.mean())
        if stage == 2 and (k + 1) % cfg.densify.interval == 0:
            self.densify()
        return rec

    def _renormalize(self):
        with torch.no_grad():
            q = self.st.params["quats"]
            q /= q.norm(dim=1, keepdim=True).clamp_min(1e-12)
            for r in self.st.pose_rot:
                r /= r.norm(dim=1, keepdim=True).clamp_min(1e-12)

    def densify(self):
        mean_grad = self.grad_accum / np.maximum(self.grad_count, 1)
        scene, keep, clone = densify_and_prune(self.st.to_scene(), mean_grad, self.cfg.densify, self.rng)
        self._set_scene(scene, (keep, clone))

    def run_stage(self, stage: int, n_iters: int | None = None) -> list[dict]:
        n = self.cfg.stage_iters[stage - 1] if n_iters is None else n_iters
        out = []
        t0 = time.perf_counter()
        window = []
        for _ in range(n):
            rec = self.step(stage)
            window.append(rec)
            out.append(rec)
            if self.cfg.eval_every and self.iteration % self.cfg.eval_every == 0:
                summary = {"iter": self.iteration, "stage": stage, "n_primitives": len(self.st)}
                for key in ("loss", "rgb", "depth_near", "depth_far"):
                    vals = [r[key] for r in window if key in r]
                    if vals:
                        summary[key] = float(np.mean(vals))
                summary["train_psnr"] = self.train_psnr(subset=6)
                self._log(summary)
                window = []
        log.info("stage %d: %d iterations in %.1f s", stage, n, time.perf_counter() - t0)
        return out

    def fit(self) -> SceneGraph:
        for stage in (1, 2, 3):
            self.run_stage(stage)
        return self.scene()

    def _log(self, record: dict):
        self.records.append(record)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def train_psnr(self, subset: int | None = None) -> float:
        idx = range(len(self.views))
        if subset:
            idx = np.linspace(0, len(self.views) - 1, subset).round().astype(int)
        with torch.no_grad():
            vals = [psnr(render(self.st, self.views[i], background=self.background).image(), self.images[i])
                    for i in idx]
        return float(np.mean(vals))


def train(dataset, config: TrainConfig | None = None, log_path=None) -> tuple[SceneGraph, list[dict]]:
    """Run all three stages; returns the trained scene and the metrics records."""
    ds = dataset if isinstance(dataset, Dataset) else Dataset(dataset)
    tr = Trainer(ds, config, log_path)
    scene = tr.fit()
    return scene, tr.records


def evaluate(scene: SceneGraph, views: list[CameraView], images, background=(0.0, 0.0, 0.0)) -> dict:
    """PSNR / SSIM over ``views`` plus a per-view breakdown."""
    per = []
    st = SceneTensors(scene)
    for v, img in zip(views, images):
        out = render_color(st, v, background=background)
        per.append({"view": v.name, "frame": v.frame, "psnr": psnr(out, img), "ssim": ssim(out, img)})
    return {"psnr": float(np.mean([p["psnr"] for p in per])) if per else float("nan"),
            "ssim": float(np.mean([p["ssim"] for p in per])) if per else float("nan"),
            "per_view": per}


class Reconstructor(BaseEstimator):
    """scikit-learn style wrapper: ``fit`` a dataset directory, ``predict`` images for views."""

    def __init__(self, stage_iters=(500, 1500, 1000), beta_occ: float = 0.95, ivw: bool = True,
                 bootstrap: bool = True, seed: int = 0, config: TrainConfig | None = None):
        self.stage_iters = stage_iters
        self.beta_occ = beta_occ
        self.ivw = ivw
        self.bootstrap = bootstrap
        self.seed = seed
        self.config = config

    def _config(self) -> TrainConfig:
        base = copy.deepcopy(self.config) if self.config is not None else TrainConfig()
        for name in ("stage_iters", "beta_occ", "ivw", "bootstrap", "seed"):
            setattr(base, name, getattr(self, name))
        base.__post_init__()
        return base

    def fit(self, X, y=None):
        ds = X if isinstance(X, Dataset) else Dataset(X)
        tr = Trainer(ds, self._config())
        self.scene_ = tr.fit()
        self.records_ = tr.records
        self.background_ = ds.background
        return self

    def predict(self, X) -> np.ndarray:
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "scene_")
        views = [X] if isinstance(X, CameraView) else list(X)
        st = SceneTensors(self.scene_)
        return np.stack([render_color(st, v, background=self.background_) for v in views])

    def score(self, X, y) -> float:
        """Mean PSNR of predictions for views ``X`` against images ``y``."""
        pred = self.predict(X)
        return float(np.mean([psnr(p, t) for p, t in zip(pred, y)]))


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig)]
