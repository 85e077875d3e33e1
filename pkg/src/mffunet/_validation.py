"""Input validation helpers for image / mask arrays."""
from __future__ import annotations

import numpy as np

from .data import resize_nearest


def check_images(X, size: int = None) -> np.ndarray:
    """Coerce ``X`` to a float32 N x 1 x H x W array in [0, 1].

    Accepts N x H x W or N x 1 x H x W; uint8 input is scaled by 1/255.
    Non-square or off-size images are nearest-neighbour resized to ``size``.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1:
        raise ValueError(f"expected images of shape (N, H, W) or (N, 1, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / np.float32(255.0)
    else:
        X = X.astype(np.float32)
        if not np.all(np.isfinite(X)):
            raise ValueError("images contain NaN or infinite values")
        if X.min() < 0.0 or X.max() > 1.0:
            raise ValueError("float images must lie in [0, 1]; pass uint8 for raw 8-bit data")
    if size is not None and X.shape[2:] != (size, size):
        X = resize_nearest(X, size, size)
    return np.ascontiguousarray(X)


def check_masks(y, num_classes: int, size: int = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 3:
        raise ValueError(f"expected masks of shape (N, H, W), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError("mask values must be integer class ids")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(f"mask values must lie in [0, {num_classes})")
    if size is not None and y.shape[1:] != (size, size):
        y = resize_nearest(y, size, size)
    return y


def check_images_masks(X, y, num_classes: int, size: int = None):
    X = check_images(X, size)
    y = check_masks(y, num_classes, size)
    if X.shape[0] != y.shape[0] or X.shape[2:] != y.shape[1:]:
        raise ValueError(f"images {X.shape} and masks {y.shape} are inconsistent")
    return X, y
