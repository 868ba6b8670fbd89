"""Input validation helpers for the estimator-facing API."""
from __future__ import annotations

import numpy as np


def check_image_batch(X, name: str = "X") -> np.ndarray:
    """Coerce to (n, h, w, 3) float32 in [-0.5, 0.5].

    Accepts float arrays already in [-0.5, 0.5] or in [0, 1], and uint8;
    a single image (h, w, 3) is promoted to a batch of one.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"{name} must be (n, h, w, 3), got {X.shape}")
    if X.shape[1] < 8 or X.shape[2] < 8:
        raise ValueError(f"{name} spatial extent too small: {X.shape}")
    if X.dtype == np.uint8:
        return (X.astype(np.float32) / 255.0) - 0.5
    X = X.astype(np.float32)
    lo, hi = float(X.min()), float(X.max())
    if lo >= -0.5 - 1e-6 and hi <= 0.5 + 1e-6:
        return np.clip(X, -0.5, 0.5)
    if lo >= 0.0 and hi <= 1.0 + 1e-6:
        return np.clip(X, 0.0, 1.0).astype(np.float32) - 0.5
    raise ValueError(
        f"{name} values must be in [-0.5, 0.5], [0, 1], or uint8; "
        f"got range [{lo:.3g}, {hi:.3g}]")


def check_label_batch(y, X: np.ndarray, num_classes: int, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise ValueError(f"{name} must be (n, h, w) integer class maps, got {y.shape}")
    if y.shape != X.shape[:3]:
        raise ValueError(f"{name} shape {y.shape} does not match images {X.shape[:3]}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == y.astype(np.int64)):
            raise ValueError(f"{name} must hold integer class indices")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= num_classes:
        raise ValueError(
            f"{name} classes must be in [0, {num_classes}), got "
            f"[{y.min()}, {y.max()}]")
    return y


def check_square_even(X: np.ndarray, resolution_factor: int, name: str = "X") -> None:
    n, h, w, _ = X.shape
    if h != w:
        raise ValueError(f"{name} must be square, got {h}x{w}")
    if h % resolution_factor:
        raise ValueError(
            f"{name} extent {h} not divisible by resolution factor {resolution_factor}")
