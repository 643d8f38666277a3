"""Fundus image normalization: black-border crop, square resize, local mean subtraction.

The local mean step follows Ben Graham's Kaggle recipe::

    out = clip(alpha * (I - G_sigma(I)) + gamma, 0, 255)

with a Gaussian local mean ``G_sigma`` whose width scales with the output size.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_image, check_image_batch
from .exceptions import AllBelowThreshold

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".jpeg", ".jpg", ".png", ".tif", ".tiff")
# Gaussian kernel half-width, in units of sigma
BLUR_TRUNCATE = 4.0


@dataclass(frozen=True)
class PreprocessConfig:
    crop_threshold: int = 7
    target_size: int = 300
    blur_sigma_fraction: float = 1 / 30
    gain_alpha: float = 4.0
    offset_gamma: float = 128.0

    def __post_init__(self):
        if not 0 <= self.crop_threshold <= 255:
            raise ValueError("crop_threshold must be in [0, 255]")
        if self.target_size < 8:
            raise ValueError("target_size must be >= 8")
        if self.blur_sigma_fraction <= 0:
            raise ValueError("blur_sigma_fraction must be > 0")
        if self.gain_alpha <= 0:
            raise ValueError("gain_alpha must be > 0")
        if not 0 <= self.offset_gamma <= 255:
            raise ValueError("offset_gamma must be in [0, 255]")

    @property
    def sigma(self) -> float:
        return self.blur_sigma_fraction * self.target_size

    def canonical(self) -> str:
        return ";".join(f"{k}={v!r}" for k, v in sorted(asdict(self).items()))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical().encode()).digest()


def crop_black_border(img: np.ndarray, threshold: int = 7) -> np.ndarray:
    """Crop to the bounding box of pixels whose brightest channel exceeds ``threshold``."""
    img = check_image(img)
    mask = img.max(axis=2) > threshold
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        raise AllBelowThreshold(f"no pixel above threshold {threshold}")
    cols = np.flatnonzero(mask.any(axis=0))
    return img[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def resize(img: np.ndarray, target_size: int = 300) -> np.ndarray:
    """Bilinear resize to ``target_size`` x ``target_size``; aspect ratio is not kept."""
    img = check_image(img)
    if img.shape[:2] == (target_size, target_size):
        return img.copy()
    return cv2.resize(img, (target_size, target_size), interpolation=cv2.INTER_LINEAR)


def gaussian_local_mean(img: np.ndarray, sigma: float) -> np.ndarray:
    """Per-channel Gaussian blur in float64 with symmetric (edge-repeating) reflection."""
    img = np.asarray(img, dtype=np.float64)
    return gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect", truncate=BLUR_TRUNCATE)


def subtract_local_average(img: np.ndarray, cfg: PreprocessConfig | None = None) -> np.ndarray:
    cfg = cfg or PreprocessConfig()
    img = check_image(img)
    x = img.astype(np.float64)
    out = cfg.gain_alpha * (x - gaussian_local_mean(x, cfg.sigma)) + cfg.offset_gamma
    return np.rint(np.clip(out, 0, 255)).astype(np.uint8)


def preprocess_image(img: np.ndarray, cfg: PreprocessConfig | None = None) -> np.ndarray:
    """crop -> resize -> local mean subtraction. Returns a ``(S, S, 3)`` uint8 image."""
    cfg = cfg or PreprocessConfig()
    img = crop_black_border(img, cfg.crop_threshold)
    img = resize(img, cfg.target_size)
    return subtract_local_average(img, cfg)


def read_image(path) -> np.ndarray:
    """Load an image file as RGB uint8."""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise OSError(f"cannot read image {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)


def write_png(path, img: np.ndarray) -> None:
    img = check_image(img)
    ok, buf = cv2.imencode(".png", cv2.cvtColor(img, cv2.COLOR_RGB2BGR),
                           [cv2.IMWRITE_PNG_COMPRESSION, 6])
    if not ok:
        raise OSError(f"PNG encoding failed for {path}")
    Path(path).write_bytes(buf.tobytes())


def find_image(image_dir, image_id: str) -> Path:
    image_dir = Path(image_dir)
    for ext in IMAGE_EXTENSIONS:
        candidate = image_dir / f"{image_id}{ext}"
        if candidate.is_file():
            return candidate
    raise FileNotFoundError(f"no image file for id {image_id!r} in {image_dir}")


def preprocess_files(ids, image_dir, out_dir, cfg: PreprocessConfig | None = None,
                     n_jobs: int = 1) -> dict[str, str]:
    """Preprocess ``ids`` from ``image_dir`` into ``out_dir/<id>.png``.

    Returns a mapping ``id -> reason`` for every image that failed.
    """
    cfg = cfg or PreprocessConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def work(image_id):
        try:
            img = read_image(find_image(image_dir, image_id))
            write_png(out_dir / f"{image_id}.png", preprocess_image(img, cfg))
        except (AllBelowThreshold, OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", image_id, exc)
            return image_id, f"{type(exc).__name__}: {exc}"
        return image_id, None

    ids = list(ids)
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(work, ids))
    else:
        results = [work(i) for i in ids]
    return {i: reason for i, reason in results if reason is not None}


class FundusPreprocessor(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping raw RGB fundus images to normalized squares.

    ``transform`` accepts a sequence of ``(H, W, 3)`` uint8 arrays (sizes may
    differ) and returns an ``(n, target_size, target_size, 3)`` uint8 array.
    """

    def __init__(self, crop_threshold=7, target_size=300, blur_sigma_fraction=1 / 30,
                 gain_alpha=4.0, offset_gamma=128.0):
        self.crop_threshold = crop_threshold
        self.target_size = target_size
        self.blur_sigma_fraction = blur_sigma_fraction
        self.gain_alpha = gain_alpha
        self.offset_gamma = offset_gamma

    @property
    def config(self) -> PreprocessConfig:
        return PreprocessConfig(self.crop_threshold, self.target_size, self.blur_sigma_fraction,
                                self.gain_alpha, self.offset_gamma)

    def fit(self, X, y=None):
        self.config  # validates parameters
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        cfg = self.config
        images = check_image_batch(X, same_shape=False)
        out = np.empty((len(images), cfg.target_size, cfg.target_size, 3), dtype=np.uint8)
        for i, img in enumerate(images):
            out[i] = preprocess_image(img, cfg)
        return out

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags
