"""Input validation shared by the estimators and functional API."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_image(img) -> np.ndarray:
    """Return ``img`` as an ``(H, W, 3)`` uint8 array, or raise ``ValueError``."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image has an empty dimension: {img.shape}")
    if img.dtype != np.uint8:
        if not np.issubdtype(img.dtype, np.number) or not np.all(np.isfinite(img)):
            raise ValueError("image must hold finite numbers")
        if img.min() < 0 or img.max() > 255:
            raise ValueError("image intensities must lie in [0, 255]")
        if not np.array_equal(img, np.round(img)):
            raise ValueError("image intensities must be integral")
        img = img.astype(np.uint8)
    return img


def check_image_batch(images, same_shape: bool = True, size: int | None = None):
    """Validate a batch of images.

    Returns a 4-D uint8 array when ``same_shape`` (optionally requiring
    ``size`` x ``size``), otherwise a list of individually validated images.
    """
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = images[None]
    checked = [check_image(im) for im in images]
    if not same_shape:
        return checked
    if not checked:
        side = size or 0
        return np.empty((0, side, side, 3), dtype=np.uint8)
    shapes = {im.shape for im in checked}
    if len(shapes) != 1:
        raise ValueError(f"images in a batch must share one shape, got {sorted(shapes)}")
    shape = shapes.pop()
    if size is not None and shape[:2] != (size, size):
        raise ValueError(f"expected {size}x{size} images, got {shape[0]}x{shape[1]}")
    return np.stack(checked)


def check_features(X, n_features: int | None = None) -> np.ndarray:
    """2-D finite float64 feature matrix, optionally with a fixed width."""
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    return X


def check_binary_labels(y, n_samples: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {y.shape}")
    if n_samples is not None and y.shape[0] != n_samples:
        raise ValueError(f"got {y.shape[0]} labels for {n_samples} samples")
    yi = y.astype(np.int64)
    if not np.array_equal(yi, y) or not np.isin(yi, (0, 1)).all():
        raise ValueError("labels must be 0 (healthy) or 1 (unhealthy)")
    return yi
