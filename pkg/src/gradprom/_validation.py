"""Input checks shared by the estimator and the harness."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, name: str = "X", allow_3d: bool = True) -> np.ndarray:
    """Return a float64 ``(N, C, H, W)`` array with values in [0, 1].

    ``(N, H, W)`` input is treated as single-channel.
    """
    arr = check_array(X, ensure_2d=False, allow_nd=True, dtype=np.float64,
                      input_name=name)
    if arr.ndim == 3 and allow_3d:
        arr = arr[:, None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must have shape (N, C, H, W) or (N, H, W); got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return np.ascontiguousarray(arr)


def check_pair(X, y):
    """Degraded/clean pair with matching count, channels and an integer scale."""
    X, y = check_images(X, "X"), check_images(y, "y")
    if len(X) != len(y):
        raise ValueError(f"X and y have different lengths ({len(X)} vs {len(y)})")
    if X.shape[1] != y.shape[1]:
        raise ValueError("X and y must have the same channel count")
    fh, fw = y.shape[2] // X.shape[2], y.shape[3] // X.shape[3]
    if fh != fw or fh * X.shape[2] != y.shape[2] or fw * X.shape[3] != y.shape[3]:
        raise ValueError("y must be an integer multiple of X's spatial size")
    if fh not in (1, 2, 4):
        raise ValueError("scale factor between X and y must be 1, 2 or 4")
    return X, y, fh


def check_labels(labels, n: int, n_classes: int, name: str = "labels") -> np.ndarray:
    arr = np.asarray(labels)
    if arr.shape != (n,) or not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{name} must be an integer array of shape ({n},)")
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ValueError(f"{name} must lie in [0, {n_classes})")
    return arr.astype(np.int64)


def check_masks(masks, shape, n_classes: int) -> np.ndarray:
    arr = np.asarray(masks)
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.shape != tuple(shape) or not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"masks must be an integer array of shape {tuple(shape)}")
    if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
        raise ValueError(f"masks must lie in [0, {n_classes})")
    return arr.astype(np.int64)
