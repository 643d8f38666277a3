"""Frozen feature extractors and the on-disk feature cache.

Two backbones share one interface:

* :class:`InceptionV3Backbone` -- the convolutional part of Inception-V3 with
  global average pooling (2048 features), run through Keras. Weights come
  from a local file that is verified against a SHA-256 digest; they are never
  downloaded implicitly.
* :class:`MockBackbone` -- a cheap deterministic stand-in: 8x8 average
  pooling, a seeded +/-1 projection and a ReLU.

Cache file layout (little-endian)::

    b"FTRC" | u8 version | u32 D | u32 count | 32B backbone fingerprint
    | 32B feature-config digest | count * (u32 id_len | id utf-8 | D * f32)
"""

from __future__ import annotations

import hashlib
import logging
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import MASK64, Xoshiro256
from ._validation import check_image_batch
from .exceptions import IntegrityError, ParseError, StaleCache
from .preprocess import PreprocessConfig

logger = logging.getLogger(__name__)

INCEPTION_FEATURE_DIM = 2048
MOCK_POOL = 8
CACHE_MAGIC = b"FTRC"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sBII32s32s")


def sha256_file(path, chunk_size: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(chunk_size), b""):
            h.update(chunk)
    return h.hexdigest()


class BackboneHandle:
    """Immutable image -> feature-vector map with an identifying fingerprint."""

    kind: str
    feature_dim: int
    fingerprint: bytes
    # how uint8 pixels are rescaled before the forward pass
    input_scaling: str

    @property
    def fingerprint_hex(self) -> str:
        return self.fingerprint.hex()

    def _forward(self, images: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def extract(self, images, batch_size: int = 16) -> np.ndarray:
        return extract_features(self, images, batch_size=batch_size)


class MockBackbone(BackboneHandle):
    """Deterministic test backbone.

    Pixels are scaled to [0, 1], average-pooled onto an 8x8 grid (cell
    ``k`` covers rows ``k*H//8`` to ``(k+1)*H//8``), flattened row-major to
    192 values, multiplied by a ``(D, 192)`` +/-1 matrix and passed through
    ``max(0, .)``. Matrix entries are the bits of successive xoshiro256**
    outputs for ``seed``, least-significant bit first, filled row-major;
    a set bit means +1.
    """

    kind = "mock"
    input_scaling = "x/255"

    def __init__(self, seed: int = 0, feature_dim: int = 64):
        if feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        self.seed = int(seed)
        self.feature_dim = int(feature_dim)
        self.projection = self._projection(self.seed, self.feature_dim)
        h = hashlib.sha256(b"mock-backbone-v1")
        h.update(struct.pack("<QI", self.seed & MASK64, self.feature_dim))
        h.update(self.projection.tobytes())
        self.fingerprint = h.digest()

    @staticmethod
    def _projection(seed: int, feature_dim: int) -> np.ndarray:
        n = feature_dim * 3 * MOCK_POOL * MOCK_POOL
        rng = Xoshiro256(seed)
        words = np.array([rng.next_u64() for _ in range(-(-n // 64))], dtype="<u8")
        bits = np.unpackbits(words.view(np.uint8), bitorder="little")[:n]
        return np.where(bits == 1, 1, -1).astype(np.int8).reshape(feature_dim, -1)

    @staticmethod
    def pool(images: np.ndarray) -> np.ndarray:
        """``(N, H, W, 3)`` uint8 -> ``(N, 192)`` cell means scaled to [0, 1]."""
        n, h, w, _ = images.shape
        if h < MOCK_POOL or w < MOCK_POOL:
            raise ValueError(f"mock backbone needs images of at least {MOCK_POOL}x{MOCK_POOL}")
        x = images.astype(np.float64) / 255.0
        rows = [k * h // MOCK_POOL for k in range(MOCK_POOL)]
        cols = [k * w // MOCK_POOL for k in range(MOCK_POOL)]
        x = np.add.reduceat(np.add.reduceat(x, rows, axis=1), cols, axis=2)
        counts = np.outer(np.diff(rows + [h]), np.diff(cols + [w]))
        x /= counts[None, :, :, None]
        return x.reshape(n, -1)

    def preactivation(self, images: np.ndarray) -> np.ndarray:
        return self.pool(images) @ self.projection.T.astype(np.float64)

    def _forward(self, images):
        return np.maximum(self.preactivation(images), 0.0)


class InceptionV3Backbone(BackboneHandle):
    """Inception-V3 convolutional base + global average pooling, via Keras.

    Pixels are mapped to [-1, 1] with ``x / 127.5 - 1``. Images are fed at
    their native size (300x300 by default); the network pools globally.
    """

    kind = "inception_v3"
    input_scaling = "x/127.5-1"

    def __init__(self, model, fingerprint: bytes, source=None):
        self.model = model
        self.fingerprint = fingerprint
        self.source = source
        self.feature_dim = int(model.output_shape[-1])
        self._lock = threading.Lock()

    @staticmethod
    def build_model(weights_path=None):
        import keras

        model = keras.applications.InceptionV3(
            include_top=False, weights=None, pooling="avg", input_shape=(None, None, 3))
        model.trainable = False
        if weights_path is not None:
            model.load_weights(str(weights_path))
        return model

    def _forward(self, images):
        x = images.astype(np.float32) / np.float32(127.5) - np.float32(1.0)
        with self._lock:
            out = self.model(x, training=False)
        return np.asarray(out, dtype=np.float64)


def mock_backbone(seed: int = 0, feature_dim: int = 64) -> MockBackbone:
    return MockBackbone(seed, feature_dim)


def load_backbone(source, expected_sha256: str | None = None) -> InceptionV3Backbone:
    """Load Inception-V3 weights from a local file after verifying its digest."""
    path = Path(source)
    if not path.is_file():
        raise IntegrityError(f"weight asset not found: {path}")
    digest = sha256_file(path)
    if expected_sha256 and digest != expected_sha256.lower():
        raise IntegrityError(f"weight asset {path} has sha256 {digest}, expected {expected_sha256}")
    try:
        model = InceptionV3Backbone.build_model(path)
    except Exception as exc:  # keras raises a zoo of types for unreadable / mismatched files
        raise IntegrityError(f"cannot load weights from {path}: {exc}") from exc
    handle = InceptionV3Backbone(model, bytes.fromhex(digest), source=path)
    if handle.feature_dim != INCEPTION_FEATURE_DIM:
        raise IntegrityError(f"pooled output has {handle.feature_dim} features, expected {INCEPTION_FEATURE_DIM}")
    return handle


def extract_features(handle: BackboneHandle, images, batch_size: int = 16) -> np.ndarray:
    """Map a batch of square uint8 images to an ``(N, D)`` float32 matrix."""
    images = check_image_batch(images)
    out = np.empty((len(images), handle.feature_dim), dtype=np.float32)
    for start in range(0, len(images), batch_size):
        feats = handle._forward(images[start:start + batch_size])
        if feats.shape != (min(batch_size, len(images) - start), handle.feature_dim):
            raise ValueError(f"backbone returned shape {feats.shape}")
        if not np.all(np.isfinite(feats)):
            raise FloatingPointError("non-finite activations; weights or inputs are corrupted")
        out[start:start + batch_size] = feats
    return out


def feature_config_digest(cfg: PreprocessConfig, handle: BackboneHandle) -> bytes:
    """Digest of everything upstream of the backbone that shapes its input."""
    text = f"{cfg.canonical()};input_scaling={handle.input_scaling}"
    return hashlib.sha256(text.encode()).digest()


@dataclass
class FeatureCache:
    feature_dim: int
    backbone_fingerprint: bytes
    config_digest: bytes
    ids: list[str] = field(default_factory=list)
    vectors: np.ndarray | None = None

    def __post_init__(self):
        if self.vectors is None:
            self.vectors = np.empty((0, self.feature_dim), dtype=np.float32)
        self.vectors = np.asarray(self.vectors, dtype=np.float32).reshape(-1, self.feature_dim)
        if len(self.ids) != len(self.vectors):
            raise ValueError("ids and vectors differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate ids in feature cache")
        if len(self.backbone_fingerprint) != 32 or len(self.config_digest) != 32:
            raise ValueError("digests must be 32 bytes")

    def __len__(self):
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, FeatureCache):
            return NotImplemented
        return (self.feature_dim == other.feature_dim
                and self.backbone_fingerprint == other.backbone_fingerprint
                and self.config_digest == other.config_digest
                and self.ids == other.ids
                and np.array_equal(self.vectors, other.vectors))

    def lookup(self, ids) -> np.ndarray:
        index = {i: n for n, i in enumerate(self.ids)}
        missing = [i for i in ids if i not in index]
        if missing:
            raise KeyError(f"{len(missing)} ids not in cache, e.g. {missing[0]!r}")
        return self.vectors[[index[i] for i in ids]]

    def check(self, fingerprint: bytes | None = None, config_digest: bytes | None = None) -> None:
        if fingerprint is not None and fingerprint != self.backbone_fingerprint:
            raise StaleCache("feature cache was built with a different backbone; re-run extract")
        if config_digest is not None and config_digest != self.config_digest:
            raise StaleCache("feature cache was built with a different preprocessing config; re-run extract")


def write_cache(cache: FeatureCache, path) -> None:
    parts = [_CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, cache.feature_dim, len(cache),
                                cache.backbone_fingerprint, cache.config_digest)]
    vectors = cache.vectors.astype("<f4")
    for image_id, vec in zip(cache.ids, vectors):
        raw = image_id.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(vec.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_cache(path, fingerprint: bytes | None = None,
               config_digest: bytes | None = None) -> FeatureCache:
    """Read a cache file; raise :class:`StaleCache` if it does not match the given digests."""
    data = Path(path).read_bytes()
    if len(data) < _CACHE_HEADER.size:
        raise ParseError(f"{path}: truncated cache header")
    magic, version, dim, count, fp, cd = _CACHE_HEADER.unpack_from(data)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise ParseError(f"{path}: not a version-{CACHE_VERSION} feature cache")
    offset = _CACHE_HEADER.size
    ids, vectors = [], np.empty((count, dim), dtype=np.float32)
    try:
        for n in range(count):
            (id_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            raw = data[offset:offset + id_len]
            if len(raw) != id_len:
                raise ParseError(f"{path}: truncated record {n}")
            ids.append(raw.decode("utf-8"))
            offset += id_len
            vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
            vectors[n] = vec
            offset += 4 * dim
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: malformed record: {exc}") from None
    if offset != len(data):
        raise ParseError(f"{path}: {len(data) - offset} trailing bytes")
    cache = FeatureCache(dim, fp, cd, ids, vectors)
    cache.check(fingerprint, config_digest)
    return cache


class BackboneFeatureExtractor(TransformerMixin, BaseEstimator):
    """Transformer wrapping a frozen backbone: images in, ``(N, D)`` features out.

    ``backbone="mock"`` uses :class:`MockBackbone` with ``seed`` and
    ``feature_dim``; ``backbone="inception_v3"`` loads ``weights_path``
    (checked against ``weights_sha256`` when given).
    """

    def __init__(self, backbone="mock", seed=0, feature_dim=64, weights_path=None,
                 weights_sha256=None, batch_size=16):
        self.backbone = backbone
        self.seed = seed
        self.feature_dim = feature_dim
        self.weights_path = weights_path
        self.weights_sha256 = weights_sha256
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        if self.backbone == "mock":
            self.handle_ = mock_backbone(self.seed, self.feature_dim)
        elif self.backbone == "inception_v3":
            self.handle_ = load_backbone(self.weights_path, self.weights_sha256)
        else:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        self.n_features_out_ = self.handle_.feature_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "handle_")
        return extract_features(self.handle_, X, batch_size=self.batch_size)

    def get_feature_names_out(self, input_features=None):
        return np.array([f"feature{i}" for i in range(self.n_features_out_)], dtype=object)
