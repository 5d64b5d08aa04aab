"""Scene representation: Gaussian field, cameras, LiDAR frames, and the scene file format.

A scene file is a JSON descriptor plus one sidecar binary blob per primitive
block (the static field, and one per dynamic object). Blobs are
little-endian float32 with a 12-byte header: magic ``FXSP``, u32 primitive
count, u32 floats per primitive.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import DynamicObject
from .geometry import quat_to_matrix, sigmoid

BLOB_MAGIC = b"FXSP"
DEFAULT_TAYLOR_ORDER = 2


class SceneFormatError(ValueError):
    """Raised when a scene file fails to parse or violates an invariant."""


@dataclass
class GaussianPrimitive:
    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    color0: np.ndarray
    color_taylor: np.ndarray | None = None
    object_id: str | None = None


@dataclass
class GaussianField:
    """Structure-of-arrays store for N primitives, unconstrained parameters.

    For members of a dynamic object, ``means`` holds logistic box coordinates
    and ``object_index`` points into ``SceneGraph.objects``; static primitives
    carry ``object_index == -1`` and world-frame means.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    color_taylor: np.ndarray
    object_index: np.ndarray

    def __post_init__(self):
        n = len(self.means)
        self.means = np.asarray(self.means, dtype=np.float32).reshape(n, 3)
        q = np.asarray(self.quats, dtype=np.float32).reshape(n, 4)
        norms = np.linalg.norm(q.astype(np.float64), axis=1, keepdims=True)
        if np.any(norms == 0):
            raise SceneFormatError("zero-norm quaternion in primitive block")
        # rows already unit to float32 precision are left untouched so that
        # renormalization is idempotent bit-for-bit
        off = np.abs(norms[:, 0] - 1.0) > 1e-6
        if np.any(off):
            q = q.copy()
            q[off] = (q[off].astype(np.float64) / norms[off]).astype(np.float32)
        self.quats = q
        self.log_scales = np.asarray(self.log_scales, dtype=np.float32).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float32).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float32).reshape(n, 3)
        ct = np.asarray(self.color_taylor, dtype=np.float32)
        self.color_taylor = ct if ct.ndim == 3 and len(ct) == n else ct.reshape(n, -1, 3)
        self.object_index = np.asarray(self.object_index, dtype=np.int32).reshape(n)
        for name in _FIELD_ATTRS:
            arr = getattr(self, name)
            if not arr.flags.writeable:
                setattr(self, name, arr.copy())

    def __len__(self) -> int:
        return len(self.means)

    @property
    def taylor_order(self) -> int:
        return self.color_taylor.shape[1]

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64))

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @classmethod
    def empty(cls, taylor_order: int = DEFAULT_TAYLOR_ORDER) -> "GaussianField":
        return cls(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
            np.zeros((0, 3)), np.zeros((0, taylor_order, 3)), np.zeros(0),
        )

    @classmethod
    def create(cls, means, scales, opacities, colors, quats=None, color_taylor=None,
               object_index=None, taylor_order: int = DEFAULT_TAYLOR_ORDER) -> "GaussianField":
        """Build a field from constrained values (scales > 0, opacities in (0, 1))."""
        means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = len(means)
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
        if np.any(scales <= 0):
            raise ValueError("scales must be strictly positive")
        op = np.clip(np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,)), 1e-6, 1 - 1e-6)
        if quats is None:
            quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        if color_taylor is None:
            color_taylor = np.zeros((n, taylor_order, 3))
        if object_index is None:
            object_index = -np.ones(n, dtype=np.int32)
        return cls(
            means, quats, np.log(scales), np.log(op) - np.log1p(-op),
            np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3)), color_taylor,
            np.broadcast_to(np.asarray(object_index), (n,)),
        )

    @classmethod
    def from_primitives(cls, prims: list[GaussianPrimitive], object_ids: list[str] = (),
                        taylor_order: int = DEFAULT_TAYLOR_ORDER) -> "GaussianField":
        if not prims:
            return cls.empty(taylor_order)
        lookup = {oid: i for i, oid in enumerate(object_ids)}
        taylor = [
            np.zeros((taylor_order, 3)) if p.color_taylor is None else np.asarray(p.color_taylor)
            for p in prims
        ]
        obj = []
        for p in prims:
            if p.object_id is not None and p.object_id not in lookup:
                raise SceneFormatError(f"primitive references unknown object {p.object_id!r}")
            obj.append(-1 if p.object_id is None else lookup[p.object_id])
        return cls.create(
            [p.mean for p in prims], [p.scale for p in prims], [p.opacity for p in prims],
            [p.color0 for p in prims], quats=[p.rotation for p in prims],
            color_taylor=taylor, object_index=obj,
        )

    def primitive(self, i: int, object_ids: list[str] = ()) -> GaussianPrimitive:
        oi = int(self.object_index[i])
        return GaussianPrimitive(
            self.means[i].copy(), self.quats[i].copy(), self.scales[i], float(self.opacities[i]),
            self.colors[i].copy(), self.color_taylor[i].copy(),
            object_ids[oi] if oi >= 0 and object_ids else None,
        )

    def subset(self, idx) -> "GaussianField":
        """New field with rows ``idx``; never shares memory with ``self``."""
        return GaussianField(*(np.array(getattr(self, a)[idx], copy=True) for a in _FIELD_ATTRS))

    def copy(self) -> "GaussianField":
        return self.subset(slice(None))

    @staticmethod
    def concat(fields: list["GaussianField"]) -> "GaussianField":
        fields = [f for f in fields if len(f)] or fields[:1]
        return GaussianField(*(np.concatenate([getattr(f, a) for f in fields]) for a in _FIELD_ATTRS))

    def packed(self) -> np.ndarray:
        """(N, 14 + 3K) float32 parameter rows, the blob layout."""
        n = len(self)
        return np.concatenate(
            [self.means, self.quats, self.log_scales, self.opacity_logits[:, None],
             self.colors, self.color_taylor.reshape(n, -1)], axis=1,
        ).astype(np.float32)

    @classmethod
    def unpacked(cls, rows: np.ndarray, object_index: int = -1) -> "GaussianField":
        n, width = rows.shape
        if width < 14 or (width - 14) % 3:
            raise SceneFormatError(f"bad floats-per-primitive {width}")
        return cls(
            rows[:, 0:3], rows[:, 3:7], rows[:, 7:10], rows[:, 10], rows[:, 11:14],
            rows[:, 14:].reshape(n, (width - 14) // 3, 3), np.full(n, object_index, dtype=np.int32),
        )


_FIELD_ATTRS = ("means", "quats", "log_scales", "opacity_logits", "colors", "color_taylor", "object_index")


@dataclass
class DepthMap:
    """Per-pixel depth in meters with a validity mask; invalid pixels hold NaN."""

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool) & np.isfinite(self.depth) & (self.depth > 0)
        self.depth = np.where(self.valid, self.depth, np.nan)

    @classmethod
    def from_array(cls, depth) -> "DepthMap":
        d = np.asarray(depth, dtype=np.float64)
        return cls(d, np.isfinite(d) & (d > 0))

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass
class CameraView:
    """Pinhole camera; ``rotation``/``translation`` map world to camera."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray
    timestamp: float = 0.0
    name: str = "cam"
    frame: int = 0
    role: str = "train"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"camera {self.name}: focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError(f"camera {self.name}: principal point outside image")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"camera {self.name}: rotation not orthonormal (err {err:.2e})")

    @classmethod
    def from_center(cls, center, rotation, **kw) -> "CameraView":
        rotation = np.asarray(rotation, dtype=np.float64)
        return cls(rotation=rotation, translation=-rotation @ np.asarray(center, dtype=np.float64), **kw)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def world_to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates (u, v) and camera depth z; pixel centers are integers."""
        pc = self.world_to_camera(points)
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * pc[..., 0] / z + self.cx, self.fy * pc[..., 1] / z + self.cy], -1)
        return uv, z

    def unproject(self, u, v, depth) -> np.ndarray:
        """World points at camera depth ``depth`` behind pixel coordinates (u, v)."""
        u, v, depth = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (u, v, depth)))
        pc = np.stack([(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth], -1)
        return (pc - self.translation) @ self.rotation

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        v, u = np.mgrid[0:self.height, 0:self.width]
        return u.astype(np.float64), v.astype(np.float64)

    def translated(self, offset_world, **kw) -> "CameraView":
        """Same orientation and intrinsics, camera center moved by ``offset_world``."""
        args = dict(
            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height,
            timestamp=self.timestamp, name=self.name, frame=self.frame, role=self.role,
        )
        args.update(kw)
        return CameraView.from_center(self.center + np.asarray(offset_world, dtype=np.float64),
                                      self.rotation, **args)

    def to_json(self) -> dict:
        return {
            "name": self.name, "frame": self.frame, "role": self.role, "timestamp": self.timestamp,
            "intrinsics": [self.fx, self.fy, self.cx, self.cy], "resolution": [self.width, self.height],
            "rotation": self.rotation.reshape(-1).tolist(), "translation": self.translation.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CameraView":
        fx, fy, cx, cy = d["intrinsics"]
        w, h = d["resolution"]
        return cls(fx, fy, cx, cy, int(w), int(h), d["rotation"], d["translation"],
                   float(d.get("timestamp", 0.0)), d.get("name", "cam"), int(d.get("frame", 0)),
                   d.get("role", "train"))


@dataclass
class LidarFrame:
    """One sweep in the sensor frame; ``object_ids`` index ``SceneGraph.objects`` (-1 = static)."""

    points: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    timestamp: float
    object_ids: np.ndarray | None = None
    point_times: np.ndarray | None = None
    max_range: float = np.inf

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        n = len(self.points)
        self.object_ids = (np.full(n, -1, dtype=np.int64) if self.object_ids is None
                           else np.asarray(self.object_ids, dtype=np.int64).reshape(n))
        self.point_times = (np.full(n, self.timestamp) if self.point_times is None
                            else np.asarray(self.point_times, dtype=np.float64).reshape(n))
        if n and np.linalg.norm(self.points, axis=1).max() > self.max_range * (1 + 1e-6):
            raise ValueError("LiDAR return beyond max range")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_points(self) -> np.ndarray:
        return (self.points - self.translation) @ self.rotation


@dataclass
class SceneGraph:
    field: GaussianField
    objects: list[DynamicObject] = field(default_factory=list)
    cameras: list[CameraView] = field(default_factory=list)
    lidar: list[LidarFrame] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    t_ref: float = 0.0

    def __post_init__(self):
        self.validate()

    @property
    def object_ids(self) -> list[str]:
        return [o.object_id for o in self.objects]

    def validate(self):
        n_obj = len(self.objects)
        bad = self.field.object_index[(self.field.object_index >= n_obj)]
        if len(bad):
            raise SceneFormatError(f"primitive references missing object index {int(bad[0])}")
        by_cam: dict[str, list[float]] = {}
        for cam in self.cameras:
            by_cam.setdefault(cam.name, []).append(cam.timestamp)
        for name, ts in by_cam.items():
            if np.any(np.diff(ts) <= 0):
                raise SceneFormatError(f"camera trajectory {name!r}: timestamps not strictly increasing")
        lt = [f.timestamp for f in self.lidar]
        if np.any(np.diff(lt) <= 0):
            raise SceneFormatError("LiDAR trajectory timestamps not strictly increasing")
        for k, f in enumerate(self.lidar):
            if len(f.object_ids) and f.object_ids.max() >= n_obj:
                raise SceneFormatError(f"LiDAR frame {k} references missing object index {int(f.object_ids.max())}")

    def object_by_id(self, object_id: str) -> DynamicObject:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise KeyError(object_id)

    def copy(self) -> "SceneGraph":
        import copy

        return SceneGraph(self.field.copy(), copy.deepcopy(self.objects), list(self.cameras),
                          list(self.lidar), dict(self.config), self.t_ref)

    def world_means(self, t: float) -> np.ndarray:
        """World-frame centers of all primitives at time ``t``."""
        from .dynamics import box_constrain, to_world

        out = self.field.means.astype(np.float64).copy()
        for k, obj in enumerate(self.objects):
            sel = self.field.object_index == k
            if np.any(sel):
                r, tr = obj.pose_at(t)
                out[sel] = to_world(box_constrain(out[sel], obj.dims), r, tr)
        return out

    def world_rotations(self, t: float) -> np.ndarray:
        """Rotation matrices of all primitives at time ``t`` (objects compose their pose)."""
        mats = quat_to_matrix(self.field.quats.astype(np.float64))
        for k, obj in enumerate(self.objects):
            sel = self.field.object_index == k
            if np.any(sel):
                r, _ = obj.pose_at(t)
                mats[sel] = r @ mats[sel]
        return mats


# --- blobs -------------------------------------------------------------------


def write_blob(path: Path, rows: np.ndarray):
    rows = np.ascontiguousarray(rows, dtype="<f4")
    n, w = rows.shape if rows.ndim == 2 else (0, 14)
    with open(path, "wb") as fh:
        fh.write(BLOB_MAGIC + struct.pack("<II", n, w))
        fh.write(rows.tobytes())


def read_blob(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != BLOB_MAGIC:
        raise SceneFormatError(f"{path}: missing FXSP header")
    n, w = struct.unpack("<II", data[4:12])
    expected = 12 + 4 * n * w
    if len(data) != expected:
        raise SceneFormatError(f"{path}: expected {expected} bytes for {n}x{w} floats, got {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(n, w).astype(np.float32)


# --- scene JSON --------------------------------------------------------------


def save_scene(scene: SceneGraph, path) -> None:
    """Write ``path`` (JSON) plus ``<stem>.<block>.bin`` blobs beside it."""
    from .io import write_lidar

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.stem
    blocks = []
    packed = scene.field.packed() if len(scene.field) else np.zeros((0, 14 + 3 * scene.field.taylor_order))
    groups = [(None, scene.field.object_index == -1)]
    groups += [(o.object_id, scene.field.object_index == k) for k, o in enumerate(scene.objects)]
    for oid, sel in groups:
        name = f"{stem}.{'static' if oid is None else 'obj_' + oid}.bin"
        write_blob(path.parent / name, packed[sel].reshape(-1, packed.shape[1]))
        blocks.append({"blob": name, "object_id": oid})
    lidar = []
    for k, fr in enumerate(scene.lidar):
        name = f"{stem}.lidar_{k:04d}.bin"
        write_lidar(path.parent / name, fr.points, fr.object_ids, fr.point_times)
        lidar.append({
            "points": name, "timestamp": fr.timestamp, "max_range": _finite_or_none(fr.max_range),
            "rotation": fr.rotation.reshape(-1).tolist(), "translation": fr.translation.tolist(),
        })
    doc = {
        "format": "fxd-scene", "version": 1, "t_ref": scene.t_ref,
        "taylor_order": scene.field.taylor_order,
        "primitive_blocks": blocks,
        "objects": [
            {"id": o.object_id, "dims": o.dims.tolist(), "t0": o.t0,
             "timestamps": o.timestamps.tolist(), "rotations": o.rotations.tolist(),
             "translations": o.translations.tolist(), "meta": o.meta}
            for o in scene.objects
        ],
        "cameras": [c.to_json() for c in scene.cameras],
        "lidar": lidar,
        "config": scene.config,
    }
    path.write_text(json.dumps(doc, indent=1))


def _finite_or_none(x):
    return None if not np.isfinite(x) else float(x)


def load_scene(path) -> SceneGraph:
    from .io import read_lidar

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc

    def need(d, key, where):
        if key not in d:
            raise SceneFormatError(f"{path}: {where} is missing field {key!r}")
        return d[key]

    objects = []
    for i, od in enumerate(doc.get("objects", [])):
        try:
            objects.append(DynamicObject(
                need(od, "id", f"objects[{i}]"), need(od, "dims", f"objects[{i}]"),
                need(od, "timestamps", f"objects[{i}]"), need(od, "rotations", f"objects[{i}]"),
                need(od, "translations", f"objects[{i}]"), od.get("t0"), od.get("meta", {}),
            ))
        except ValueError as exc:
            raise SceneFormatError(f"{path}: objects[{i}]: {exc}") from exc
    lookup = {o.object_id: k for k, o in enumerate(objects)}
    order = int(doc.get("taylor_order", DEFAULT_TAYLOR_ORDER))
    fields = []
    for i, block in enumerate(need(doc, "primitive_blocks", "document")):
        oid = block.get("object_id")
        if oid is not None and oid not in lookup:
            raise SceneFormatError(f"{path}: primitive_blocks[{i}] references unknown object {oid!r}")
        rows = read_blob(path.parent / need(block, "blob", f"primitive_blocks[{i}]"))
        if rows.shape[1] != 14 + 3 * order:
            raise SceneFormatError(f"{path}: primitive_blocks[{i}] has {rows.shape[1]} floats per primitive")
        fields.append(GaussianField.unpacked(rows, -1 if oid is None else lookup[oid]))
    gfield = GaussianField.concat(fields) if fields else GaussianField.empty(order)
    cameras = []
    for i, cd in enumerate(doc.get("cameras", [])):
        try:
            cameras.append(CameraView.from_json(cd))
        except (KeyError, ValueError) as exc:
            raise SceneFormatError(f"{path}: cameras[{i}]: {exc}") from exc
    lidar = []
    for i, ld in enumerate(doc.get("lidar", [])):
        pts, oids, times = read_lidar(path.parent / need(ld, "points", f"lidar[{i}]"))
        mr = ld.get("max_range")
        lidar.append(LidarFrame(pts, ld["rotation"], ld["translation"], float(ld["timestamp"]),
                                oids, times, np.inf if mr is None else float(mr)))
    return SceneGraph(gfield, objects, cameras, lidar, doc.get("config", {}), float(doc.get("t_ref", 0.0)))
