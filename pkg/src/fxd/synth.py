"""Procedural driving-scene benchmark with ground truth for laterally shifted cameras.

A scene is a set of analytic surfaces (ground plane and oriented boxes:
buildings, walls, trees, poles and moving cars). Ground-truth images are
rendered from a dense Gaussian field laid on those surfaces with the same
rasterizer used for training; LiDAR returns and ground-truth depth are ray
cast against the analytic surfaces.

World frame: z up, the vehicle drives along +x (path frame = world frame for
straight trajectories), +y is left.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import DynamicObject, box_unconstrain
from .geometry import look_rotation, matrix_to_quat, quat_multiply, yaw_quat
from .io import read_depth, read_lidar, read_ppm, write_depth, write_lidar, write_ppm
from .rasterizer import render_color
from .scene import CameraView, DepthMap, GaussianField, LidarFrame, SceneGraph, load_scene, save_scene

log = logging.getLogger(__name__)

SKY = (0.62, 0.74, 0.88)


@dataclass
class LidarSpec:
    channels: int = 32
    elevation_deg: tuple[float, float] = (-24.0, 6.0)
    azimuth_step_deg: float = 1.0
    max_range: float = 40.0
    range_noise: float = 0.02
    pose_jitter: float = 0.0
    height: float = 1.9


@dataclass
class SceneSpec:
    seed: int = 0
    preset: str = "street"
    trajectory: str = "straight"
    arc_radius: float = 120.0
    n_frames: int = 30
    fps: float = 10.0
    speed: float = 5.0
    width: int = 96
    height: int = 64
    hfov_deg: float = 90.0
    camera_height: float = 1.6
    camera_pitch: float = 0.06
    side_yaw: float = 0.7
    eval_offset: float = 3.0
    n_cars: int = 2
    lane_change: bool = True
    gt_spacing: float = 0.4
    ground_spacing: float = 0.5
    splat_sigma: float = 0.55
    lidar: LidarSpec = field(default_factory=LidarSpec)

    def __post_init__(self):
        if isinstance(self.lidar, dict):
            self.lidar = LidarSpec(**self.lidar)
        self.lidar.elevation_deg = tuple(self.lidar.elevation_deg)

    @property
    def fx(self) -> float:
        return self.width / 2 / np.tan(np.radians(self.hfov_deg) / 2)

    def to_dict(self) -> dict:
        return asdict(self)


# --- analytic surfaces ---------------------------------------------------------


@dataclass
class Box:
    center: np.ndarray
    dims: np.ndarray
    yaw: float
    base: np.ndarray
    texture: str = "plain"
    object_index: int = -1
    faces: tuple[str, ...] = ("+x", "-x", "+y", "-y", "+z")

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class Layout:
    boxes: list[Box]
    ground_x: tuple[float, float]
    ground_y: tuple[float, float]
    cars: list[dict]


def _ground_color(x, y):
    x, y = np.asarray(x), np.asarray(y)
    asphalt = np.array([0.32, 0.32, 0.34])
    walk = np.array([0.62, 0.58, 0.52])
    col = np.where((np.abs(y) > 5.25)[..., None], walk, asphalt)
    # dashed lane lines and solid edge lines
    dash = (np.abs(np.abs(y) - 1.75) < 0.12) & ((np.floor(x / 3.0) % 2) == 0)
    edge = np.abs(np.abs(y) - 5.1) < 0.12
    col = np.where((dash | edge)[..., None], np.array([0.92, 0.92, 0.85]), col)
    tiles = (np.abs(y) > 5.25) & ((np.floor(x / 1.5) + np.floor(y / 1.5)) % 2 == 0)
    col = np.where(tiles[..., None], col * 0.85, col)
    return col


def _texture(box: Box, face: str, a, b):
    """Color on a face given face-local coordinates (a horizontal, b vertical) in meters."""
    base = box.base
    if box.texture == "facade":
        win = ((np.mod(a, 3.0) > 0.9) & (np.mod(a, 3.0) < 2.2) & (np.mod(b, 3.2) > 1.1)
               & (np.mod(b, 3.2) < 2.6) & (b > 1.0))
        col = np.where(win[..., None], np.array([0.18, 0.24, 0.32]), base)
        return np.where((b < 0.5)[..., None], base * 0.6, col)
    if box.texture == "car":
        glass = (b > 0.85) & (face != "+z")
        return np.where(glass[..., None], np.array([0.12, 0.14, 0.18]), base)
    if box.texture == "tree":
        n = np.sin(a * 5.1) * np.sin(b * 4.3)
        return np.clip(base * (1 + 0.25 * n)[..., None], 0, 1)
    if box.texture == "stripes":
        s = (np.floor(b / 0.4) % 2) == 0
        return np.where(s[..., None], base, base * 0.55)
    return np.broadcast_to(base, np.shape(a) + (3,))


def build_layout(spec: SceneSpec) -> Layout:
    rng = np.random.default_rng(spec.seed)
    length = spec.speed * spec.n_frames / spec.fps
    x_lo, x_hi = -8.0, length + 55.0
    boxes: list[Box] = []
    # building rows on both sides
    for side in (1, -1):
        x = x_lo + rng.uniform(0, 4)
        while x < x_hi:
            w = rng.uniform(6, 12)
            depth = rng.uniform(5, 8)
            h = rng.uniform(6, 14)
            base = rng.uniform(0.35, 0.85, 3)
            boxes.append(Box(np.array([x + w / 2, side * (10 + depth / 2), h / 2]),
                             np.array([w, depth, h]), 0.0, base, "facade",
                             faces=("-x", "+x", "-y" if side > 0 else "+y")))
            x += w + rng.uniform(1.0, 5.0)
    # occluders at several depths between the road and the facades
    occ = {"street": (9.0, 5.0), "occlusion": (4.5, 2.5)}.get(spec.preset, (9.0, 5.0))
    pole_gap, tree_gap = occ
    for side in (1, -1):
        for x in np.arange(x_lo + rng.uniform(0, pole_gap), x_hi, pole_gap):
            boxes.append(Box(np.array([x, side * 6.0, 2.25]), np.array([0.35, 0.35, 4.5]), 0.0,
                             np.array([0.85, 0.45, 0.15]), "stripes"))
        for x in np.arange(x_lo + rng.uniform(0, tree_gap), x_hi, tree_gap * 2):
            boxes.append(Box(np.array([x, side * 7.6, 1.9]), np.array([1.6, 1.6, 2.2]), rng.uniform(0, 1),
                             np.array([0.2, 0.55, 0.2]), "tree"))
        if spec.preset == "occlusion":
            for x in np.arange(x_lo + rng.uniform(0, 6), x_hi, 6.0):
                boxes.append(Box(np.array([x, side * 9.2, 0.6]), np.array([2.5, 0.4, 1.2]), 0.0,
                                 np.array([0.75, 0.75, 0.78]), "plain"))
    # cars, members of dynamic objects
    cars = []
    car_dims = np.array([4.4, 1.9, 1.5])
    lanes = [(0.0, 14.0, 0.5 * spec.speed), (3.5, 22.0, 0.8 * spec.speed),
             (-3.5, 30.0, -spec.speed), (3.5, 40.0, 0.2 * spec.speed)]
    for k in range(spec.n_cars):
        y0, x0, v = lanes[k % len(lanes)]
        change = spec.lane_change and k == 1
        base = rng.uniform(0.2, 0.9, 3)
        cars.append({"id": f"car{k}", "y0": y0, "x0": x0, "v": v, "dims": car_dims,
                     "change": change, "base": base})
        boxes.append(Box(np.zeros(3), car_dims, 0.0, base, "car", object_index=k))
    return Layout(boxes, (x_lo, x_hi), (-13.0, 13.0), cars)


def car_pose(car: dict, t: float, duration: float) -> tuple[float, np.ndarray]:
    """(yaw, center) of a car at time ``t``; a lane change eases from y0 toward 0."""
    x = car["x0"] + car["v"] * t
    y = car["y0"]
    yaw = 0.0
    if car["change"]:
        s = np.clip(t / max(duration, 1e-9), 0, 1)
        y = car["y0"] * (1 - (3 * s**2 - 2 * s**3))
        dy = -car["y0"] * (6 * s - 6 * s**2) / max(duration, 1e-9)
        yaw = np.arctan2(dy, max(car["v"], 1e-3))
    return yaw, np.array([x, y, car["dims"][2] / 2])


def vehicle_pose(spec: SceneSpec, t: float) -> tuple[np.ndarray, float]:
    """Position (ground level) and heading of the ego vehicle at time ``t``."""
    s = spec.speed * t
    if spec.trajectory == "arc":
        r = spec.arc_radius
        yaw = s / r
        return np.array([r * np.sin(yaw), r * (1 - np.cos(yaw)), 0.0]), yaw
    if spec.trajectory != "straight":
        raise ValueError(f"unknown trajectory {spec.trajectory!r}")
    return np.array([s, 0.0, 0.0]), 0.0


def frame_boxes(layout: Layout, spec: SceneSpec, t: float) -> list[Box]:
    duration = spec.n_frames / spec.fps
    out = []
    for b in layout.boxes:
        if b.object_index >= 0:
            yaw, c = car_pose(layout.cars[b.object_index], t, duration)
            b = Box(c, b.dims, yaw, b.base, b.texture, b.object_index, b.faces)
        out.append(b)
    return out


# --- ray casting ---------------------------------------------------------------


def ray_cast(origins, dirs, boxes: list[Box], ground_x, ground_y, max_dist=np.inf):
    """Nearest hit distance and hit id (-1 ground, k box index, -2 miss) per ray."""
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs))
    dirs = np.asarray(dirs, dtype=np.float64)
    best = np.full(len(dirs), np.inf)
    hit = np.full(len(dirs), -2)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = -origins[:, 2] / dirs[:, 2]
        gp = origins + tg[:, None] * dirs
        ok = (tg > 1e-9) & (gp[:, 0] >= ground_x[0]) & (gp[:, 0] <= ground_x[1]) \
            & (gp[:, 1] >= ground_y[0]) & (gp[:, 1] <= ground_y[1])
    best = np.where(ok, tg, best)
    hit = np.where(ok, -1, hit)
    for k, b in enumerate(boxes):
        r = b.rotation()
        o = (origins - b.center) @ r
        d = dirs @ r
        half = b.dims / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - o) / d
            t2 = (half - o) / d
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        good = (tmax >= tmin) & (tmin > 1e-9) & (tmin < best)
        best = np.where(good, tmin, best)
        hit = np.where(good, k, hit)
    miss = best > max_dist
    best[miss] = np.inf
    hit[miss] = -2
    return best, hit


def depth_image(view: CameraView, boxes, layout: Layout) -> DepthMap:
    """Exact camera-frame depth of the first analytic surface behind each pixel."""
    u, v = view.pixel_grid()
    far = view.unproject(u, v, np.ones_like(u)).reshape(-1, 3)
    c = view.center
    dirs = far - c
    norm = np.linalg.norm(dirs, axis=1)
    dist, hit = ray_cast(c, dirs / norm[:, None], boxes, layout.ground_x, layout.ground_y)
    depth = dist / norm  # unit camera-z per unit along (far - c)
    return DepthMap(depth.reshape(view.shape), (hit > -2).reshape(view.shape))


def lidar_directions(ls: LidarSpec) -> np.ndarray:
    el = np.radians(np.linspace(ls.elevation_deg[0], ls.elevation_deg[1], ls.channels))
    az = np.radians(np.arange(0.0, 360.0, ls.azimuth_step_deg))
    e, a = np.meshgrid(el, az, indexing="ij")
    return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], -1).reshape(-1, 3)


def simulate_lidar(spec: SceneSpec, layout: Layout, frame: int, rng: np.random.Generator) -> LidarFrame:
    t = frame / spec.fps
    pos, yaw = vehicle_pose(spec, t)
    ls = spec.lidar
    center = pos + np.array([0.0, 0.0, ls.height])
    # sensor frame: x forward, y left, z up, rotated with the vehicle
    rot_ws = np.array([[np.cos(yaw), -np.sin(yaw), 0], [np.sin(yaw), np.cos(yaw), 0], [0, 0, 1.0]])
    dirs_s = lidar_directions(ls)
    dirs_w = dirs_s @ rot_ws.T
    boxes = frame_boxes(layout, spec, t)
    dist, hit = ray_cast(center, dirs_w, boxes, layout.ground_x, layout.ground_y, ls.max_range)
    ok = np.isfinite(dist)
    dist, hit, dirs_s = dist[ok], hit[ok], dirs_s[ok]
    if ls.range_noise > 0:
        dist = np.clip(dist + rng.normal(0, ls.range_noise, len(dist)), 1e-3, ls.max_range)
    pts_s = dirs_s * dist[:, None]
    oid = np.array([boxes[h].object_index if h >= 0 else -1 for h in hit], dtype=np.int64)
    # the recorded pose carries the vibration error; points stay in the true sensor frame
    rec_center, rec_rot = center, rot_ws
    if ls.pose_jitter > 0:
        rec_center = center + rng.normal(0, ls.pose_jitter, 3)
        ang = rng.normal(0, ls.pose_jitter * 0.01, 3)
        kx = np.array([[0, -ang[2], ang[1]], [ang[2], 0, -ang[0]], [-ang[1], ang[0], 0]])
        u, _, vt = np.linalg.svd(np.eye(3) + kx)
        rec_rot = (u @ vt) @ rot_ws
    r_sw = rec_rot.T
    return LidarFrame(pts_s, r_sw, -r_sw @ rec_center, t, oid, np.full(len(pts_s), t), ls.max_range)


# --- ground-truth Gaussian field -------------------------------------------------


_FACE_AXES = {
    "+x": (0, 1, 2, 1.0), "-x": (0, 1, 2, -1.0), "+y": (1, 0, 2, 1.0), "-y": (1, 0, 2, -1.0),
    "+z": (2, 0, 1, 1.0),
}


def _face_samples(box: Box, face: str, spacing: float, inset: float = 0.0):
    """Local points, face-local (a, b) coordinates and local normal for one face."""
    n_ax, a_ax, b_ax, sign = _FACE_AXES[face]
    half = box.dims / 2
    na = max(int(np.ceil(box.dims[a_ax] / spacing)), 1)
    nb = max(int(np.ceil(box.dims[b_ax] / spacing)), 1)
    ga = (np.arange(na) + 0.5) / na * box.dims[a_ax] - half[a_ax]
    gb = (np.arange(nb) + 0.5) / nb * box.dims[b_ax] - half[b_ax]
    aa, bb = np.meshgrid(ga, gb, indexing="ij")
    local = np.zeros(aa.shape + (3,))
    local[..., n_ax] = sign * (half[n_ax] - inset)
    local[..., a_ax] = aa
    local[..., b_ax] = bb
    normal = np.zeros(3)
    normal[n_ax] = sign
    # vertical coordinate measured from the box bottom for texturing
    b_coord = bb + half[b_ax] if b_ax == 2 else bb
    a_coord = aa + half[a_ax]
    return local.reshape(-1, 3), a_coord.ravel(), b_coord.ravel(), normal, (box.dims[a_ax] / na, box.dims[b_ax] / nb)


def _normal_quat(normal: np.ndarray, yaw: float) -> np.ndarray:
    """Quaternion whose local z axis is ``normal`` (box frame), composed with the box yaw."""
    z = normal / np.linalg.norm(normal)
    x = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = x - z * (x @ z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    q_local = matrix_to_quat(np.stack([x, y, z], 1))
    return quat_multiply(yaw_quat(yaw), q_local)


def _cell_average(fn, a, b, da, db, n: int = 4):
    """Texture averaged over each sample's cell, so neighboring splats vary smoothly."""
    acc = 0.0
    for i in range(n):
        for j in range(n):
            acc = acc + fn(a + ((i + 0.5) / n - 0.5) * da, b + ((j + 0.5) / n - 0.5) * db)
    return acc / (n * n)


def gt_field(layout: Layout, spec: SceneSpec) -> tuple[GaussianField, list[DynamicObject]]:
    s = spec.gt_spacing
    g = spec.ground_spacing
    fields = []
    gx = np.arange(layout.ground_x[0] + g / 2, layout.ground_x[1], g)
    gy = np.arange(layout.ground_y[0] + g / 2, layout.ground_y[1], g)
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)], 1)
    k = spec.splat_sigma
    col = _cell_average(_ground_color, pts[:, 0], pts[:, 1], g, g)
    fields.append(GaussianField.create(pts, [k * g, k * g, 0.02], 0.99, col))
    duration = spec.n_frames / spec.fps
    objects = []
    for box in layout.boxes:
        sp = s if box.object_index < 0 else 0.5 * s
        for face in box.faces:
            local, a, b, normal, (da, db) = _face_samples(box, face, sp, inset=0.0)
            col = _cell_average(lambda x, y: _texture(box, face, x, y), a, b, da, db)
            q = _normal_quat(normal, 0.0 if box.object_index >= 0 else box.yaw)
            # tangential extent follows the sample spacing on this face
            scales = np.array([k * db if abs(normal[2]) < 0.9 else k * da,
                               k * da if abs(normal[2]) < 0.9 else k * db, 0.02])
            if box.object_index < 0:
                world = local @ box.rotation().T + box.center
                fields.append(GaussianField.create(world, scales, 0.99, col, quats=np.tile(q, (len(world), 1))))
            else:
                margin = 1.04
                logistic = box_unconstrain(local, box.dims * margin)
                fields.append(GaussianField.create(logistic, scales, 0.99, col, quats=np.tile(q, (len(local), 1)),
                                                   object_index=np.full(len(local), box.object_index)))
    for car in layout.cars:
        ts = np.arange(spec.n_frames) / spec.fps
        poses = [car_pose(car, t, duration) for t in ts]
        objects.append(DynamicObject(car["id"], car["dims"] * 1.04, ts,
                                     [yaw_quat(p[0]) for p in poses], [p[1] for p in poses]))
    return GaussianField.concat(fields), objects


# --- cameras -------------------------------------------------------------------


def rig_views(spec: SceneSpec, frame: int) -> list[CameraView]:
    t = frame / spec.fps
    pos, yaw = vehicle_pose(spec, t)
    fx = spec.fx
    common = dict(fx=fx, fy=fx, cx=spec.width / 2 - 0.5, cy=spec.height / 2 - 0.5,
                  width=spec.width, height=spec.height, timestamp=t, frame=frame)
    up = np.array([0.0, 0.0, spec.camera_height])
    lateral = np.array([-np.sin(yaw), np.cos(yaw), 0.0])
    views = []
    for name, dyaw in (("front", 0.0), ("front_left", spec.side_yaw), ("front_right", -spec.side_yaw)):
        views.append(CameraView.from_center(pos + up, look_rotation(yaw + dyaw, spec.camera_pitch),
                                            name=name, role="train", **common))
    for name, off in (("eval_left", spec.eval_offset), ("eval_right", -spec.eval_offset)):
        views.append(CameraView.from_center(pos + up + off * lateral, look_rotation(yaw, spec.camera_pitch),
                                            name=name, role="eval", **common))
    return views


# --- dataset -------------------------------------------------------------------


def generate(spec: SceneSpec, out_dir) -> Path:
    """Write a complete dataset (manifest, images, depth, LiDAR, GT scene) to ``out_dir``."""
    if spec.n_frames < 1:
        raise ValueError("trajectory needs at least one frame")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    layout = build_layout(spec)
    field_gt, objects = gt_field(layout, spec)
    views = [v for f in range(spec.n_frames) for v in rig_views(spec, f)]
    lidar = [simulate_lidar(spec, layout, f, rng) for f in range(spec.n_frames)]
    t_ref = 0.5 * (spec.n_frames - 1) / spec.fps
    scene = SceneGraph(field_gt, objects, views, lidar, {"spec": spec.to_dict()}, t_ref)
    records = []
    for view in views:
        boxes = frame_boxes(layout, spec, view.timestamp)
        img = render_color(scene, view, background=SKY)
        depth = depth_image(view, boxes, layout)
        img_path = f"images/{view.name}/{view.frame:04d}.ppm"
        dep_path = f"depth/{view.name}/{view.frame:04d}.fxdm"
        (out / img_path).parent.mkdir(parents=True, exist_ok=True)
        (out / dep_path).parent.mkdir(parents=True, exist_ok=True)
        write_ppm(out / img_path, img)
        write_depth(out / dep_path, depth.depth, depth.valid)
        rec = view.to_json()
        rec.update(image=img_path, depth=dep_path)
        records.append(rec)
    (out / "lidar").mkdir(exist_ok=True)
    lidar_recs = []
    for k, fr in enumerate(lidar):
        path = f"lidar/{k:04d}.bin"
        write_lidar(out / path, fr.points, fr.object_ids, fr.point_times)
        lidar_recs.append({"points": path, "timestamp": fr.timestamp, "max_range": fr.max_range,
                           "rotation": fr.rotation.reshape(-1).tolist(), "translation": fr.translation.tolist()})
    gt_only = SceneGraph(field_gt, objects, [], [], {"spec": spec.to_dict()}, t_ref)
    save_scene(gt_only, out / "scene_gt.json")
    manifest = {
        "format": "fxd-dataset", "version": 1, "spec": spec.to_dict(), "background": list(SKY),
        "t_ref": t_ref, "n_frames": spec.n_frames,
        "roles": {"train": ["front", "front_left", "front_right"], "eval": ["eval_left", "eval_right"]},
        "views": records, "lidar": lidar_recs,
        "objects": [{"id": o.object_id, "dims": o.dims.tolist(), "timestamps": o.timestamps.tolist(),
                     "rotations": o.rotations.tolist(), "translations": o.translations.tolist()}
                    for o in objects],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


class EvalAccessError(PermissionError):
    """Training code tried to read an evaluation-only view."""


class Dataset:
    """Read access to a generated dataset directory.

    Evaluation views are locked unless ``allow_eval=True``.
    """

    def __init__(self, root, allow_eval: bool = False):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(path)
        self.manifest = json.loads(path.read_text())
        if "roles" not in self.manifest or "views" not in self.manifest:
            raise ValueError(f"{path}: manifest is missing roles/views")
        self.allow_eval = allow_eval
        self.views = [CameraView.from_json(r) for r in self.manifest["views"]]
        self.background = tuple(self.manifest.get("background", SKY))
        self.t_ref = float(self.manifest.get("t_ref", 0.0))
        self._lidar = None
        self._objects = None

    def spec(self) -> SceneSpec:
        return SceneSpec(**self.manifest["spec"])

    def train_views(self) -> list[CameraView]:
        return [v for v in self.views if v.role == "train"]

    def eval_views(self) -> list[CameraView]:
        self._check_eval()
        return [v for v in self.views if v.role == "eval"]

    def _check_eval(self):
        if not self.allow_eval:
            raise EvalAccessError("evaluation views are not readable from a training dataset handle")

    def _record(self, view: CameraView) -> dict:
        for r in self.manifest["views"]:
            if r["name"] == view.name and r["frame"] == view.frame:
                if r.get("role") == "eval":
                    self._check_eval()
                return r
        raise KeyError((view.name, view.frame))

    def image(self, view: CameraView) -> np.ndarray:
        return read_ppm(self.root / self._record(view)["image"])

    def depth(self, view: CameraView) -> DepthMap:
        d, valid = read_depth(self.root / self._record(view)["depth"])
        return DepthMap(d, valid)

    def objects(self) -> list[DynamicObject]:
        if self._objects is None:
            self._objects = [DynamicObject(o["id"], o["dims"], o["timestamps"], o["rotations"], o["translations"])
                             for o in self.manifest.get("objects", [])]
        return self._objects

    def lidar(self) -> list[LidarFrame]:
        if self._lidar is None:
            frames = []
            for rec in self.manifest["lidar"]:
                pts, oid, times = read_lidar(self.root / rec["points"])
                frames.append(LidarFrame(pts, rec["rotation"], rec["translation"], rec["timestamp"], oid, times,
                                         rec.get("max_range") or np.inf))
            self._lidar = frames
        return self._lidar

    def sensor_scene(self) -> SceneGraph:
        """Empty field with the training cameras, LiDAR and object boxes (no GT geometry)."""
        return SceneGraph(GaussianField.empty(), [o for o in self.objects()], self.train_views(), self.lidar(),
                          {}, self.t_ref)

    def gt_scene(self) -> SceneGraph:
        self._check_eval()
        return load_scene(self.root / "scene_gt.json")


def dataset_digest(root) -> str:
    """SHA-256 over every data file in a dataset directory, in sorted path order.

    The provenance log is run metadata and is left out.
    """
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and p.name != "provenance.jsonl":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# --- known-error fields ------------------------------------------------------------


def perturb_field(scene: SceneGraph, kind: str, magnitude: float, view: CameraView | None = None,
                  seed: int = 0) -> SceneGraph:
    """Copy of ``scene`` with a controlled geometric error.

    ``scale_depth``: static geometry scaled by ``magnitude`` about the center of
    ``view`` (default: the first camera), so depths along that camera grow by
    the factor while its image is unchanged. ``add_floaters``: ``int(magnitude)``
    random primitives in front of that camera. ``jitter_positions``: Gaussian
    noise of std ``magnitude`` meters on static means.
    """
    out = scene.copy()
    f = out.field
    static = f.object_index == -1
    rng = np.random.default_rng(seed)
    view = view or (scene.cameras[0] if scene.cameras else None)
    if kind == "scale_depth":
        if magnitude <= 0:
            raise ValueError("scale must be positive")
        if magnitude == 1:
            return out
        c = view.center
        f.means[static] = ((f.means[static] - c) * magnitude + c).astype(np.float32)
        f.log_scales[static] += np.float32(np.log(magnitude))
        for obj in out.objects:
            obj.translations = (obj.translations - c) * magnitude + c
            obj.dims = obj.dims * magnitude
    elif kind == "add_floaters":
        n = int(magnitude)
        if n <= 0:
            return out
        u = rng.uniform(0, view.width - 1, n)
        v = rng.uniform(0, view.height - 1, n)
        d = rng.uniform(2.0, 20.0, n)
        pts = view.unproject(u, v, d).reshape(-1, 3)
        extra = GaussianField.create(pts, rng.uniform(0.1, 0.4, (n, 3)), rng.uniform(0.3, 0.9, n),
                                     rng.random((n, 3)), taylor_order=f.taylor_order)
        out.field = GaussianField.concat([f, extra])
    elif kind == "jitter_positions":
        if magnitude == 0:
            return out
        f.means[static] += rng.normal(0, magnitude, (int(static.sum()), 3)).astype(np.float32)
    else:
        raise ValueError(f"unknown perturbation {kind!r}")
    return out
