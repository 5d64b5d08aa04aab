"""CPU Gaussian splatting: projection, depth-sorted alpha compositing, ray-limited blending.

Compositing works on an explicit list of (query point, primitive) pairs.
Query points are continuous screen positions, either the pixel grid of a
view or arbitrary rays cast from the camera center (inverse view warping).
Pairs are generated without gradients (tile binning plus a 3-sigma footprint
test) and the blending itself is written in differentiable torch ops, so
backpropagation through a render is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .dynamics import box_constrain
from .geometry import quat_to_matrix, slerp
from .scene import CameraView, DepthMap, GaussianField, GaussianPrimitive, SceneGraph

NEAR_PLANE = 0.2
COV2D_DILATION = 0.3
ALPHA_MAX = 0.99
T_MIN = 1e-4
FOOTPRINT_SIGMA = 3.0
TILE = 8


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray


@dataclass
class RaySample:
    origin: np.ndarray
    direction: np.ndarray
    d0: float | None = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        self.direction = d / np.linalg.norm(d)
        if self.d0 is not None and not self.d0 > 0:
            raise ValueError("reference depth d0 must be positive")


class SceneTensors:
    """Torch view of a :class:`SceneGraph`'s parameters.

    With ``requires_grad=True`` every primitive parameter and every object
    pose track becomes a leaf tensor; :meth:`to_scene` writes them back.
    """

    PARAM_NAMES = ("means", "quats", "log_scales", "opacity_logits", "colors", "color_taylor")

    def __init__(self, scene: SceneGraph, dtype=torch.float64, requires_grad: bool = False):
        self.scene = scene
        self.dtype = dtype
        f = scene.field
        self.params = {
            name: torch.tensor(np.asarray(getattr(f, name), dtype=np.float64), dtype=dtype,
                               requires_grad=requires_grad)
            for name in self.PARAM_NAMES
        }
        self.object_index = torch.from_numpy(f.object_index.astype(np.int64))
        self.pose_rot = [torch.tensor(o.rotations, dtype=dtype, requires_grad=requires_grad)
                         for o in scene.objects]
        self.pose_trans = [torch.tensor(o.translations, dtype=dtype, requires_grad=requires_grad)
                           for o in scene.objects]
        t0 = np.full(len(f), scene.t_ref, dtype=np.float64)
        for k, o in enumerate(scene.objects):
            t0[f.object_index == k] = o.t0
        self.t0 = torch.tensor(t0, dtype=dtype)
        self._members = [torch.nonzero(self.object_index == k).flatten() for k in range(len(scene.objects))]

    def __len__(self) -> int:
        return self.params["means"].shape[0]

    def leaves(self) -> list[torch.Tensor]:
        return list(self.params.values()) + self.pose_rot + self.pose_trans

    def object_pose(self, k: int, t: float):
        obj = self.scene.objects[k]
        ts = obj.timestamps
        if len(ts) == 0 or t < ts[0] - 1e-9 or t > ts[-1] + 1e-9:
            raise KeyError(f"object {obj.object_id!r} has no pose at t={t}")
        i = min(max(int(np.searchsorted(ts, t, side="right")) - 1, 0), len(ts) - 1)
        q, tr = self.pose_rot[k], self.pose_trans[k]
        if i == len(ts) - 1 or abs(t - ts[i]) < 1e-12:
            return quat_to_matrix(q[i]), tr[i]
        w = float((t - ts[i]) / (ts[i + 1] - ts[i]))
        qa, qb = q[i] / q[i].norm(), q[i + 1] / q[i + 1].norm()
        dot = float((qa * qb).sum())
        if dot < 0:
            qb, dot = -qb, -dot
        if dot > 0.9995:
            qi = qa + w * (qb - qa)
        else:
            th = math.acos(dot)
            qi = (math.sin((1 - w) * th) * qa + math.sin(w * th) * qb) / math.sin(th)
        return quat_to_matrix(qi), (1 - w) * tr[i] + w * tr[i + 1]

    def canonical_order(self) -> np.ndarray:
        """Lexicographic order of the raw parameter rows.

        Vectorized kernels may round an element differently depending on its
        position in the batch, so projection runs in this order to make
        renders independent of the input order of the primitives.
        """
        n = len(self)
        if n < 2:
            return np.arange(n)
        with torch.no_grad():
            cols = [self.params[k].detach().reshape(n, -1) for k in self.PARAM_NAMES]
            rows = torch.cat(cols + [self.object_index[:, None].to(cols[0].dtype)], 1).cpu().numpy()
        return np.lexsort(rows.T[::-1])

    def evaluate(self, t: float, order: np.ndarray | None = None):
        """World means, world rotation matrices, opacities, scales and colors at time ``t``.

        With ``order`` the outputs are computed for primitives ``order`` (in that order).
        """
        p = self.params
        members = self._members
        t0 = self.t0
        if order is not None:
            idx_t = torch.from_numpy(np.asarray(order, dtype=np.int64))
            p = {k: v[idx_t] for k, v in p.items()}
            oi = self.object_index[idx_t]
            members = [torch.nonzero(oi == k).flatten() for k in range(len(self.scene.objects))]
            t0 = t0[idx_t]
        means = p["means"]
        rots = quat_to_matrix(p["quats"])
        for k, idx in enumerate(members):
            if len(idx) == 0:
                continue
            r, tr = self.object_pose(k, t)
            local = box_constrain(means[idx], self.scene.objects[k].dims)
            means = means.index_put((idx,), _rotate(r, local) + tr)
            rots = rots.index_put((idx,), r @ rots[idx])
        dt = t - t0
        color = p["colors"]
        order = p["color_taylor"].shape[1]
        for k in range(1, order + 1):
            color = color + p["color_taylor"][:, k - 1] * (dt**k / math.factorial(k))[:, None]
        color = color.clamp(0.0, 1.0)
        return means, rots, torch.sigmoid(p["opacity_logits"]), torch.exp(p["log_scales"]), color

    def to_scene(self) -> SceneGraph:
        """A new SceneGraph holding the current tensor values."""
        out = self.scene.copy()
        f = out.field
        with torch.no_grad():
            out.field = GaussianField(
                *(self.params[n].detach().cpu().numpy() for n in self.PARAM_NAMES), f.object_index,
            )
            for k, obj in enumerate(out.objects):
                obj.rotations = self.pose_rot[k].detach().cpu().numpy().astype(np.float64)
                obj.rotations /= np.linalg.norm(obj.rotations, axis=1, keepdims=True)
                obj.translations = self.pose_trans[k].detach().cpu().numpy().astype(np.float64)
        return out


def as_tensors(scene, dtype=torch.float64) -> SceneTensors:
    return scene if isinstance(scene, SceneTensors) else SceneTensors(scene, dtype=dtype)


def _rotate(r: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    # written out per component so each row's rounding is independent of N
    return torch.stack([(r[..., i, :] * p).sum(-1) for i in range(3)], dim=-1)


@dataclass
class Projection:
    """Batched projected primitives for one camera (torch, differentiable)."""

    mean2d: torch.Tensor
    conic: torch.Tensor
    cov2d: torch.Tensor
    depth: torch.Tensor
    opacity: torch.Tensor
    color: torch.Tensor
    radius: np.ndarray
    visible: np.ndarray


def project_field(scene, view: CameraView, t: float, bounds=None, near: float = NEAR_PLANE) -> Projection:
    """Project every primitive into ``view``.

    ``bounds`` = (xmin, xmax, ymin, ymax) of the query region in pixels
    (defaults to the image); primitives whose footprint misses it are
    flagged not visible, as are those in front of the near plane.
    """
    st = as_tensors(scene)
    dt = st.dtype
    if bounds is None:
        bounds = (0.0, view.width - 1.0, 0.0, view.height - 1.0)
    order = st.canonical_order()
    inv = torch.from_numpy(np.argsort(order))
    means, rots, opac, scales, color = st.evaluate(t, order)
    rc = torch.tensor(view.rotation, dtype=dt)
    tc = torch.tensor(view.translation, dtype=dt)
    pc = _rotate(rc, means) + tc
    z = pc[:, 2]
    in_front = (z > near).detach().cpu().numpy()
    zs = torch.where(z > near, z, torch.ones_like(z))
    fx, fy = view.fx, view.fy
    u = fx * pc[:, 0] / zs + view.cx
    v = fy * pc[:, 1] / zs + view.cy
    # clamp the Jacobian's lateral term well outside the image and query region
    ext_x = max(abs(bounds[0] - view.cx), abs(bounds[1] - view.cx), view.cx, view.width - view.cx)
    ext_y = max(abs(bounds[2] - view.cy), abs(bounds[3] - view.cy), view.cy, view.height - view.cy)
    lim_x = 1.3 * ext_x / fx
    lim_y = 1.3 * ext_y / fy
    tx = (pc[:, 0] / zs).clamp(-lim_x, lim_x)
    ty = (pc[:, 1] / zs).clamp(-lim_y, lim_y)
    zero = torch.zeros_like(zs)
    jac = torch.stack([
        torch.stack([fx / zs, zero, -fx * tx / zs], -1),
        torch.stack([zero, fy / zs, -fy * ty / zs], -1),
    ], dim=1)
    m = rots * scales[:, None, :]
    cov3 = m @ m.transpose(1, 2)
    w = jac @ rc
    cov2 = w @ cov3 @ w.transpose(1, 2)
    a = cov2[:, 0, 0] + COV2D_DILATION
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + COV2D_DILATION
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], -1)
    cov2d = torch.stack([torch.stack([a, b], -1), torch.stack([b, c], -1)], 1)
    with torch.no_grad():
        mid = 0.5 * (a + c)
        lam = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.0))
        radius = (FOOTPRINT_SIGMA * torch.sqrt(lam)).cpu().numpy()
        un, vn = u.cpu().numpy(), v.cpu().numpy()
    on_screen = ((un + radius >= bounds[0] - 0.5) & (un - radius <= bounds[1] + 0.5)
                 & (vn + radius >= bounds[2] - 0.5) & (vn - radius <= bounds[3] + 0.5))
    visible = in_front & on_screen & np.isfinite(radius)
    back = inv.numpy()
    return Projection(torch.stack([u, v], -1)[inv], conic[inv], cov2d[inv], z[inv], opac[inv], color[inv],
                      radius[back], visible[back])


def project(primitive: GaussianPrimitive | GaussianField, view: CameraView, t: float = 0.0):
    """Project a single static primitive; ``None`` when culled."""
    field = primitive if isinstance(primitive, GaussianField) else GaussianField.from_primitives([primitive])
    scene = SceneGraph(field, t_ref=t)
    proj = project_field(scene, view, t)
    if not proj.visible[0]:
        return None
    return ProjectedGaussian(
        proj.mean2d[0].detach().numpy(), proj.cov2d[0].detach().numpy(), float(proj.depth[0]),
        float(proj.opacity[0]), proj.color[0].detach().numpy(),
    )


def _segment_offsets(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For repeated segments of length ``counts``: (segment id, position within segment)."""
    total = int(counts.sum())
    seg = np.repeat(np.arange(len(counts)), counts)
    starts = np.cumsum(counts) - counts
    return seg, np.arange(total) - starts[seg]


def _pairs(proj: Projection, qxy: np.ndarray, thresholds: np.ndarray | None, tile: int,
           grid: tuple[int, int] | None = None):
    """Sorted (query, primitive) pairs that can have non-zero alpha.

    ``grid = (W, H)`` declares that ``qxy`` is the row-major pixel grid, which
    lets candidates be enumerated per pixel instead of per tile.
    """
    empty = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
    g = np.nonzero(proj.visible)[0]
    if len(g) == 0 or len(qxy) == 0:
        return empty
    with torch.no_grad():
        mu = proj.mean2d.detach().cpu().numpy().astype(np.float64)
        con = proj.conic.detach().cpu().numpy().astype(np.float64)
        cov = proj.cov2d.detach().cpu().numpy().astype(np.float64)
        depth = proj.depth.detach().cpu().numpy().astype(np.float64)
    # exact bounding box of the footprint ellipse
    ext_x = FOOTPRINT_SIGMA * np.sqrt(cov[g, 0, 0])
    ext_y = FOOTPRINT_SIGMA * np.sqrt(cov[g, 1, 1])
    # visit primitives front to back so a stable sort by query keeps depth order
    rank = np.empty(len(depth), dtype=np.int64)
    rank[np.argsort(depth, kind="stable")] = np.arange(len(depth))
    o = np.argsort(rank[g])
    g, ext_x, ext_y = g[o], ext_x[o], ext_y[o]

    if grid is not None:
        w, h = grid
        lo_x = np.maximum(np.ceil(mu[g, 0] - ext_x), 0).astype(np.int64)
        hi_x = np.minimum(np.floor(mu[g, 0] + ext_x), w - 1).astype(np.int64)
        lo_y = np.maximum(np.ceil(mu[g, 1] - ext_y), 0).astype(np.int64)
        hi_y = np.minimum(np.floor(mu[g, 1] + ext_y), h - 1).astype(np.int64)
        hit = (hi_x >= lo_x) & (hi_y >= lo_y)
        g, lo_x, hi_x, lo_y, hi_y = g[hit], lo_x[hit], hi_x[hit], lo_y[hit], hi_y[hit]
        nx = hi_x - lo_x + 1
        seg, pos = _segment_offsets(nx * (hi_y - lo_y + 1))
        qi = (lo_y[seg] + pos // nx[seg]) * w + lo_x[seg] + pos % nx[seg]
        gi = g[seg]
    else:
        x0, y0 = qxy[:, 0].min() - 0.5, qxy[:, 1].min() - 0.5
        qt = np.floor((qxy - [x0, y0]) / tile).astype(np.int64)
        ntx, nty = int(qt[:, 0].max()) + 1, int(qt[:, 1].max()) + 1
        qtile = qt[:, 1] * ntx + qt[:, 0]
        q_order = np.argsort(qtile, kind="stable")
        edges = np.searchsorted(qtile[q_order], np.arange(ntx * nty + 1))
        tile_start, tile_count = edges[:-1], np.diff(edges)
        lo_x = np.floor((mu[g, 0] - ext_x - x0) / tile).astype(np.int64)
        hi_x = np.floor((mu[g, 0] + ext_x - x0) / tile).astype(np.int64)
        lo_y = np.floor((mu[g, 1] - ext_y - y0) / tile).astype(np.int64)
        hi_y = np.floor((mu[g, 1] + ext_y - y0) / tile).astype(np.int64)
        hit = (hi_x >= 0) & (lo_x < ntx) & (hi_y >= 0) & (lo_y < nty)
        g, lo_x, hi_x, lo_y, hi_y = g[hit], lo_x[hit], hi_x[hit], lo_y[hit], hi_y[hit]
        lo_x, lo_y = np.maximum(lo_x, 0), np.maximum(lo_y, 0)
        hi_x, hi_y = np.minimum(hi_x, ntx - 1), np.minimum(hi_y, nty - 1)
        nx = hi_x - lo_x + 1
        seg, pos = _segment_offsets(nx * (hi_y - lo_y + 1))
        tid = (lo_y[seg] + pos // nx[seg]) * ntx + lo_x[seg] + pos % nx[seg]
        gi = g[seg]
        nq = tile_count[tid]
        seg2, pos2 = _segment_offsets(nq)
        qi = q_order[tile_start[tid][seg2] + pos2]
        gi = gi[seg2]

    dx = qxy[qi, 0] - mu[gi, 0]
    dy = qxy[qi, 1] - mu[gi, 1]
    cg = con[gi]
    power = 0.5 * (cg[:, 0] * dx * dx + cg[:, 2] * dy * dy) + cg[:, 1] * dx * dy
    keep = power <= 0.5 * FOOTPRINT_SIGMA**2
    if thresholds is not None:
        keep &= depth[gi] > thresholds[qi]
    qi, gi, power = qi[keep], gi[keep], power[keep]
    order = np.argsort(qi, kind="stable")
    return qi[order], gi[order], power[order]


@dataclass
class Composite:
    color: torch.Tensor  # (Q, 3) premultiplied, no background
    weight: torch.Tensor  # (Q,) sum of alpha_i T_i
    depth_sum: torch.Tensor  # (Q,) sum of alpha_i T_i d_i


def composite(proj: Projection, qxy: np.ndarray, thresholds: np.ndarray | None = None,
              tile: int = TILE, grid: tuple[int, int] | None = None) -> Composite:
    """Front-to-back alpha blending at query points ``qxy`` (Q, 2).

    With ``thresholds`` only primitives deeper than ``thresholds[q]`` take
    part at query q; both the contributions and the transmittance product
    run over that filtered subset.
    """
    qxy = np.asarray(qxy, dtype=np.float64).reshape(-1, 2)
    n_q = len(qxy)
    dtype = proj.depth.dtype
    qi, gi, power = _pairs(proj, qxy, thresholds, tile, grid)
    if len(qi):
        # Pairs behind the termination point form a suffix of each query's
        # segment and carry zero weight and zero gradient; drop them here.
        with torch.no_grad():
            opac = proj.opacity.detach().cpu().numpy().astype(np.float64)
        a = np.minimum(opac[gi] * np.exp(-power), ALPHA_MAX)
        lt = np.log1p(-a)
        cs = np.cumsum(lt)
        ex = cs - lt
        is_start = np.r_[True, qi[1:] != qi[:-1]]
        start_idx = np.maximum.accumulate(np.where(is_start, np.arange(len(qi)), 0))
        live = np.exp(ex - ex[start_idx]) >= T_MIN
        qi, gi = qi[live], gi[live]
    if len(qi) == 0:
        zeros = torch.zeros(n_q, dtype=dtype)
        return Composite(torch.zeros(n_q, 3, dtype=dtype) + 0.0 * proj.color.sum(), zeros, zeros.clone())
    qi_t = torch.from_numpy(qi)
    gi_t = torch.from_numpy(gi)
    q = torch.from_numpy(qxy).to(dtype)[qi_t]
    d = q - proj.mean2d[gi_t]
    con = proj.conic[gi_t]
    power = 0.5 * (con[:, 0] * d[:, 0] ** 2 + con[:, 2] * d[:, 1] ** 2) + con[:, 1] * d[:, 0] * d[:, 1]
    alpha = (proj.opacity[gi_t] * torch.exp(-power)).clamp(max=ALPHA_MAX)
    # per-query exclusive transmittance via a segmented prefix sum of log(1 - alpha)
    log_t = torch.log1p(-alpha).double()
    excl = torch.cumsum(log_t, 0) - log_t
    is_start = np.r_[True, qi[1:] != qi[:-1]]
    start_idx = np.maximum.accumulate(np.where(is_start, np.arange(len(qi)), 0))
    trans = torch.exp(excl - excl[torch.from_numpy(start_idx)]).to(dtype)
    w = alpha * trans
    color = torch.zeros(n_q, 3, dtype=dtype).index_add(0, qi_t, w[:, None] * proj.color[gi_t])
    weight = torch.zeros(n_q, dtype=dtype).index_add(0, qi_t, w)
    depth_sum = torch.zeros(n_q, dtype=dtype).index_add(0, qi_t, w * proj.depth[gi_t])
    return Composite(color, weight, depth_sum)


def grid_points(view: CameraView) -> np.ndarray:
    u, v = view.pixel_grid()
    return np.stack([u.ravel(), v.ravel()], -1)


@dataclass
class RenderResult:
    """Differentiable render of one view: (H, W, 3) color, (H, W) depth and weight."""

    color: torch.Tensor
    depth: torch.Tensor
    weight: torch.Tensor
    valid: torch.Tensor
    projection: Projection

    def depth_map(self) -> DepthMap:
        d = self.depth.detach().cpu().numpy().astype(np.float64)
        return DepthMap(d, self.valid.cpu().numpy())

    def image(self) -> np.ndarray:
        return self.color.detach().cpu().numpy().astype(np.float64)


def normalized_depth(comp: Composite):
    valid = comp.weight.detach() >= T_MIN
    safe = torch.where(valid, comp.weight, torch.ones_like(comp.weight))
    depth = torch.where(valid, comp.depth_sum / safe, torch.full_like(comp.weight, float("nan")))
    return depth, valid


def render(scene, view: CameraView, t: float | None = None, background=(0.0, 0.0, 0.0)) -> RenderResult:
    """Color and normalized alpha-blended depth for every pixel of ``view``."""
    st = as_tensors(scene)
    t = view.timestamp if t is None else t
    proj = project_field(st, view, t)
    comp = composite(proj, grid_points(view), grid=(view.width, view.height))
    bg = torch.as_tensor(background, dtype=st.dtype)
    color = comp.color + (1.0 - comp.weight)[:, None] * bg
    depth, valid = normalized_depth(comp)
    h, w = view.height, view.width
    return RenderResult(color.reshape(h, w, 3), depth.reshape(h, w), comp.weight.reshape(h, w),
                        valid.reshape(h, w), proj)


def render_color(scene, view: CameraView, t: float | None = None, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    with torch.no_grad():
        return render(scene, view, t, background).image()


def render_depth(scene, view: CameraView, t: float | None = None) -> DepthMap:
    with torch.no_grad():
        return render(scene, view, t).depth_map()


def rays_to_screen(view: CameraView, points) -> np.ndarray:
    """Screen positions of rays from ``view``'s center through world ``points``."""
    uv, _ = view.project(points)
    return uv


def render_rays(scene, view: CameraView, qxy: np.ndarray, d0: np.ndarray | None, t: float,
                beta: float = 0.0, background=(0.0, 0.0, 0.0)):
    """Occlusion-limited blending along rays from ``view``'s center.

    Rays are given by their continuous screen positions ``qxy`` (which may lie
    outside the image). Only primitives with camera depth greater than
    ``beta * d0`` take part. Returns (color (Q, 3), weight (Q,)) tensors.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    st = as_tensors(scene)
    qxy = np.asarray(qxy, dtype=np.float64).reshape(-1, 2)
    if len(qxy) == 0:
        return torch.zeros(0, 3, dtype=st.dtype), torch.zeros(0, dtype=st.dtype)
    bounds = (qxy[:, 0].min(), qxy[:, 0].max(), qxy[:, 1].min(), qxy[:, 1].max())
    proj = project_field(st, view, t, bounds=bounds)
    thr = None
    if d0 is not None and beta > 0:
        thr = beta * np.asarray(d0, dtype=np.float64).reshape(-1)
    comp = composite(proj, qxy, thr)
    bg = torch.as_tensor(background, dtype=st.dtype)
    return comp.color + (1.0 - comp.weight)[:, None] * bg, comp.weight


def render_ray_limited(scene, ray: RaySample, t: float, beta: float, view: CameraView,
                       background=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, bool]:
    """Blend one ray cast from ``view``'s camera center; ``ray.d0`` is a camera-frame depth."""
    if np.linalg.norm(ray.origin - view.center) > 1e-6 * max(1.0, np.linalg.norm(view.center)):
        raise ValueError("ray must start at the camera center of `view`")
    dc = view.rotation @ ray.direction
    if dc[2] <= 0:
        return np.asarray(background, dtype=np.float64), False
    qxy = np.array([[view.fx * dc[0] / dc[2] + view.cx, view.fy * dc[1] / dc[2] + view.cy]])
    with torch.no_grad():
        color, weight = render_rays(scene, view, qxy, None if ray.d0 is None else [ray.d0], t, beta,
                                    background)
    return color[0].numpy().astype(np.float64), bool(weight[0] >= T_MIN)
