"""Input validation helpers used by the estimators and the model layer."""

import numpy as np


def check_image_batch(X, height=None, width=None):
    """Coerce X to a (N, H, W, 3) uint8 image batch.

    Accepts a single image (H, W, 3) or a batch; lists are stacked.  When
    height / width are given the image size is enforced as well.
    """
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images of shape (N, H, W, 3), got {X.shape}")
    if height is not None and X.shape[1:3] != (height, width):
        raise ValueError(
            f"expected {height}x{width} images, got {X.shape[1]}x{X.shape[2]}"
        )
    if X.dtype != np.uint8:
        if np.issubdtype(X.dtype, np.floating) and X.max(initial=0.0) <= 1.0:
            X = (X * 255.0).round()
        X = np.clip(X, 0, 255).astype(np.uint8)
    return X


def check_divisible(height, width, stride):
    if height % stride or width % stride:
        raise ValueError(
            f"image size {height}x{width} is not divisible by stride {stride}; "
            "no implicit padding is performed"
        )


def check_map_batch(arr, name, n, height, width, channels=None):
    """Validate a dense target batch of shape (N, [C,] H, W)."""
    arr = np.asarray(arr, dtype=np.float32)
    expect = (n, channels, height, width) if channels is not None else (n, height, width)
    if arr.shape != expect:
        raise ValueError(f"{name}: expected shape {expect}, got {arr.shape}")
    return arr


def check_unit_interval(arr, name):
    arr = np.asarray(arr)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name}: values must lie in [0, 1]")
    return arr


def check_fraction(value, name):
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie strictly inside (0, 1), got {value}")
    return float(value)
