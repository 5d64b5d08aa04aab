"""Input checks in the spirit of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np


def check_depth_pairs(rendered, sparse) -> tuple[np.ndarray, np.ndarray]:
    """Flatten matched (rendered, sparse) depth samples and require finite positive values."""
    r = np.asarray(rendered, dtype=np.float64).reshape(-1)
    s = np.asarray(sparse, dtype=np.float64).reshape(-1)
    if r.shape != s.shape:
        raise ValueError(f"rendered and sparse depth have different lengths ({len(r)} vs {len(s)})")
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(s))):
        raise ValueError("depth samples must be finite")
    if np.any(s <= 0):
        raise ValueError("sparse depth must be strictly positive")
    return r, s


def check_image(image, name: str = "image") -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must be HxWx3, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    return img


def check_same_shape(*arrays) -> None:
    shapes = {np.shape(a)[:2] for a in arrays if a is not None}
    if len(shapes) > 1:
        raise ValueError(f"resolution mismatch: {sorted(shapes)}")
