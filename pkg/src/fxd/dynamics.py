"""Box-constrained dynamic objects and time-varying primitive color."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .geometry import normalize_quat, quat_to_matrix, sigmoid, slerp


class MissingPoseError(KeyError):
    pass


@dataclass
class DynamicObject:
    """A rigid box whose member primitives live in logistic box coordinates.

    ``timestamps`` index the per-frame pose track; ``rotations`` are unit
    quaternions mapping box-local to world, ``translations`` the box centers.
    """

    object_id: str
    dims: np.ndarray
    timestamps: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    t0: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dims = np.asarray(self.dims, dtype=np.float64).reshape(3)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.rotations = normalize_quat(np.asarray(self.rotations, dtype=np.float64).reshape(-1, 4))
        self.translations = np.asarray(self.translations, dtype=np.float64).reshape(-1, 3)
        if np.any(self.dims <= 0):
            raise ValueError(f"object {self.object_id!r}: box dims must be positive, got {self.dims}")
        n = len(self.timestamps)
        if len(self.rotations) != n or len(self.translations) != n:
            raise ValueError(f"object {self.object_id!r}: pose track length mismatch")
        if n and np.any(np.diff(self.timestamps) <= 0):
            raise ValueError(f"object {self.object_id!r}: pose timestamps not strictly increasing")
        if self.t0 is None and n:
            self.t0 = 0.5 * (self.timestamps[0] + self.timestamps[-1])

    def pose_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """(R, T) at time ``t``; slerp/lerp between the bracketing frames."""
        ts = self.timestamps
        if len(ts) == 0 or t < ts[0] - 1e-9 or t > ts[-1] + 1e-9:
            raise MissingPoseError(f"object {self.object_id!r} has no pose at t={t}")
        k = int(np.searchsorted(ts, t, side="right")) - 1
        k = min(max(k, 0), len(ts) - 1)
        if k == len(ts) - 1 or abs(t - ts[k]) < 1e-12:
            return quat_to_matrix(self.rotations[k]), self.translations[k].copy()
        w = (t - ts[k]) / (ts[k + 1] - ts[k])
        q = slerp(self.rotations[k], self.rotations[k + 1], w)
        tr = (1 - w) * self.translations[k] + w * self.translations[k + 1]
        return quat_to_matrix(q), tr

    def quat_at(self, t: float) -> np.ndarray:
        ts = self.timestamps
        self.pose_at(t)  # range check
        k = min(max(int(np.searchsorted(ts, t, side="right")) - 1, 0), len(ts) - 1)
        if k == len(ts) - 1:
            return self.rotations[k].copy()
        w = (t - ts[k]) / (ts[k + 1] - ts[k])
        return normalize_quat(slerp(self.rotations[k], self.rotations[k + 1], w))

    def contains(self, local: np.ndarray) -> np.ndarray:
        half = self.dims / 2
        return np.all(np.abs(local) < half, axis=-1)


def box_constrain(logistic, dims):
    """Map unbounded logistic coordinates into the open box centered at 0.

    Works on numpy arrays or torch tensors of shape (..., 3). The sigmoid
    rounds to exactly 0 or 1 for large inputs, so results are clamped to the
    nearest representable value inside the half extent.
    """
    if isinstance(logistic, torch.Tensor):
        dims = torch.as_tensor(dims, dtype=logistic.dtype)
        half = dims / 2
        inner = torch.nextafter(half, torch.zeros_like(half))
        return torch.maximum(torch.minimum(dims * (torch.sigmoid(logistic) - 0.5), inner), -inner)
    dims = np.asarray(dims, dtype=np.float64)
    inner = np.nextafter(dims / 2, 0.0)
    return np.clip(dims * (sigmoid(logistic) - 0.5), -inner, inner)


def box_unconstrain(local, dims):
    """Inverse of :func:`box_constrain` for points strictly inside the box."""
    frac = np.asarray(local, dtype=np.float64) / np.asarray(dims, dtype=np.float64) + 0.5
    if np.any(frac <= 0) or np.any(frac >= 1):
        raise ValueError("point lies outside the open box")
    return np.log(frac) - np.log1p(-frac)


def to_world(local, rotation, translation):
    """Rigid transform ``R @ p + T``; ``rotation`` may be a 3x3 matrix or quaternion."""
    if isinstance(local, torch.Tensor):
        r = torch.as_tensor(rotation, dtype=local.dtype)
        if r.shape[-1] == 4:
            r = quat_to_matrix(r)
        return local @ r.transpose(-1, -2) + torch.as_tensor(translation, dtype=local.dtype)
    r = np.asarray(rotation, dtype=np.float64)
    if r.shape == (4,):
        r = quat_to_matrix(r)
    return np.asarray(local, dtype=np.float64) @ r.T + np.asarray(translation, dtype=np.float64)


def object_to_world(obj: DynamicObject, logistic, t: float):
    r, tr = obj.pose_at(t)
    return to_world(box_constrain(logistic, obj.dims), r, tr)


def taylor_factors(dt: float, order: int) -> np.ndarray:
    """[dt^k / k!] for k = 1..order."""
    return np.array([dt**k / math.factorial(k) for k in range(1, order + 1)])


def color_at_time(color0, color_taylor, t: float, t0: float):
    """Clamped Taylor-series color ``c0 + sum_k c_k (t - t0)^k / k!``.

    ``color0`` is (..., 3) and ``color_taylor`` (..., K, 3). Accepts numpy or
    torch; the clamp is applied only here, never to the stored parameters.
    """
    if isinstance(color0, torch.Tensor):
        k = color_taylor.shape[-2]
        f = torch.as_tensor(taylor_factors(t - t0, k), dtype=color0.dtype)
        c = color0 + torch.einsum("...kc,k->...c", color_taylor, f) if k else color0
        return c.clamp(0.0, 1.0)
    color0 = np.asarray(color0, dtype=np.float64)
    color_taylor = np.asarray(color_taylor, dtype=np.float64)
    k = color_taylor.shape[-2]
    c = color0 + (np.einsum("...kc,k->...c", color_taylor, taylor_factors(t - t0, k)) if k else 0.0)
    return np.clip(c, 0.0, 1.0)
