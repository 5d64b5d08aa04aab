"""Raster and point-cloud file formats.

* images: binary PPM (P6, maxval 255, row-major)
* depth: ``FXDM`` + u32 W + u32 H + f32 invalid sentinel (NaN), then W*H
  little-endian f32 row-major
* LiDAR: per point little-endian f32 x, y, z, u32 object id
  (0xFFFFFFFF = static), f32 timestamp
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

DEPTH_MAGIC = b"FXDM"
NO_OBJECT = 0xFFFFFFFF
_LIDAR_DTYPE = np.dtype([("xyz", "<f4", (3,)), ("obj", "<u4"), ("t", "<f4")])


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.round(np.nan_to_num(img) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    """Float RGB in [0, 1], shape (H, W, 3)."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only P6 maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def write_depth(path, depth: np.ndarray, valid: np.ndarray | None = None) -> None:
    d = np.asarray(depth, dtype=np.float64).copy()
    if valid is not None:
        d[~np.asarray(valid, dtype=bool)] = np.nan
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC + struct.pack("<IIf", w, h, float("nan")))
        fh.write(d.astype("<f4").tobytes())


def read_depth(path) -> tuple[np.ndarray, np.ndarray]:
    """(depth, valid) with invalid pixels reported as NaN in ``depth``."""
    data = Path(path).read_bytes()
    if data[:4] != DEPTH_MAGIC:
        raise ValueError(f"{path}: missing FXDM header")
    w, h, sentinel = struct.unpack("<IIf", data[4:16])
    d = np.frombuffer(data, dtype="<f4", count=w * h, offset=16).reshape(h, w).astype(np.float64)
    valid = np.isfinite(d) if np.isnan(sentinel) else (d != sentinel)
    d = np.where(valid, d, np.nan)
    return d, valid


def write_lidar(path, points, object_ids=None, times=None) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rec = np.zeros(len(pts), dtype=_LIDAR_DTYPE)
    rec["xyz"] = pts
    oid = np.full(len(pts), -1) if object_ids is None else np.asarray(object_ids)
    rec["obj"] = np.where(oid < 0, NO_OBJECT, oid).astype(np.uint32)
    rec["t"] = 0.0 if times is None else np.asarray(times)
    Path(path).write_bytes(rec.tobytes())


def read_lidar(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rec = np.frombuffer(Path(path).read_bytes(), dtype=_LIDAR_DTYPE)
    oid = rec["obj"].astype(np.int64)
    oid[rec["obj"] == NO_OBJECT] = -1
    return rec["xyz"].astype(np.float64), oid, rec["t"].astype(np.float64)


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")
