"""Classifier head trained on frozen features: ReLU layer -> 2-way softmax, cosine loss.

Class order is fixed everywhere: column 0 is healthy, column 1 unhealthy.

The loss compares the softmax output ``p`` with the one-hot target ``t``::

    L(p, t) = 1 - <p, t> / (|p| |t|)

Training is plain mini-batch SGD (no momentum, no weight decay). With the
``linear_ascent`` schedule the step size grows linearly over the whole run
and reaches ``eta_max`` on the final step.

Checkpoint layout (little-endian)::

    b"HEAD" | u8 version | u32 D | u32 H | u8 class-order tag | 32B backbone fingerprint
    | f32 W1 (H*D, row-major) | f32 b1 (H) | f32 W2 (2*H) | f32 b2 (2)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._rng import Xoshiro256, derive_seed
from ._validation import check_binary_labels, check_features
from .exceptions import DivergenceError, FingerprintMismatch, ParseError

N_CLASSES = 2
SCHEDULES = ("linear_ascent", "constant")
HEAD_MAGIC = b"HEAD"
HEAD_VERSION = 1
CLASS_ORDER_HEALTHY_FIRST = 0
_HEAD_HEADER = struct.Struct("<4sBIIB32s")
# substream key for the per-epoch shuffles
_SHUFFLE_STREAM = 1


@dataclass
class HeadParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.W2 = np.asarray(self.W2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        H, D = self.W1.shape
        if self.b1.shape != (H,) or self.W2.shape != (N_CLASSES, H) or self.b2.shape != (N_CLASSES,):
            raise ValueError("inconsistent head parameter shapes")

    @property
    def feature_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden_width(self) -> int:
        return self.W1.shape[0]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return self.W1, self.b1, self.W2, self.b2

    def copy(self) -> "HeadParams":
        return HeadParams(*(a.copy() for a in self.arrays()))

    def __eq__(self, other):
        if not isinstance(other, HeadParams):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass(frozen=True)
class TrainConfig:
    hidden_width: int = 256
    epochs: int = 50
    batch_size: int = 32
    eta_max: float = 0.0005
    schedule: str = "linear_ascent"
    seed: int = 0

    def __post_init__(self):
        if self.hidden_width < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("hidden_width and batch_size must be positive, epochs non-negative")
        if not self.eta_max > 0:
            raise ValueError("eta_max must be > 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")


@dataclass
class TrainHistory:
    schedule: str
    loss: list[float] = field(default_factory=list)
    accuracy: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"epoch": i + 1, "schedule": self.schedule, "lr": lr,
                             "loss": loss, "accuracy": acc})
                 for i, (lr, loss, acc) in enumerate(zip(self.lr, self.loss, self.accuracy))]
        return "".join(line + "\n" for line in lines)


def init_head(feature_dim: int, hidden_width: int, seed: int = 0) -> HeadParams:
    """Uniform fan-in init, +/- sqrt(6 / fan_in); zero biases.

    W1 is drawn first (row-major), then W2, from one xoshiro256** stream.
    """
    if feature_dim < 1 or hidden_width < 1:
        raise ValueError("feature_dim and hidden_width must be >= 1")
    rng = Xoshiro256(seed)
    lim1 = math.sqrt(6.0 / feature_dim)
    W1 = rng.uniform(-lim1, lim1, hidden_width * feature_dim).reshape(hidden_width, feature_dim)
    lim2 = math.sqrt(6.0 / hidden_width)
    W2 = rng.uniform(-lim2, lim2, N_CLASSES * hidden_width).reshape(N_CLASSES, hidden_width)
    return HeadParams(W1, np.zeros(hidden_width), W2, np.zeros(N_CLASSES))


def _layers(params: HeadParams, F: np.ndarray):
    a1 = F @ params.W1.T + params.b1
    h = np.maximum(a1, 0.0)
    z = h @ params.W2.T + params.b2
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return a1, h, z, p


def forward(params: HeadParams, f) -> np.ndarray:
    """Class probabilities for one feature vector ``(D,)`` or a batch ``(N, D)``."""
    f = np.asarray(f, dtype=np.float64)
    if not np.all(np.isfinite(f)):
        raise ValueError("features must be finite")
    if f.shape[-1] != params.feature_dim:
        raise ValueError(f"expected {params.feature_dim} features, got {f.shape[-1]}")
    return _layers(params, f)[3]


def logits(params: HeadParams, F) -> np.ndarray:
    return _layers(params, np.asarray(F, dtype=np.float64))[2]


def cosine_loss(p, t) -> np.ndarray | float:
    """``1 - cos(p, t)``, row-wise for 2-D input."""
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    pn = np.linalg.norm(p, axis=-1)
    if np.any(pn == 0):
        raise ValueError("cosine loss is undefined for a zero prediction vector")
    tn = np.linalg.norm(t, axis=-1)
    if np.any(tn == 0):
        raise ValueError("cosine loss is undefined for a zero target vector")
    loss = 1.0 - np.sum(p * t, axis=-1) / (pn * tn)
    return float(loss) if loss.ndim == 0 else loss


def one_hot(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    return np.eye(N_CLASSES)[y]


def batch_loss(params: HeadParams, F, T) -> float:
    return float(np.mean(cosine_loss(_layers(params, np.asarray(F, dtype=np.float64))[3], T)))


def batch_gradient(params: HeadParams, F, T) -> HeadParams:
    """Exact gradient of the mean cosine loss over the batch ``(F, T)``.

    ReLU is treated as having zero slope at exactly 0.
    """
    F = np.asarray(F, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if F.ndim != 2 or len(F) == 0 or T.shape != (len(F), N_CLASSES):
        raise ValueError("need a non-empty (N, D) feature batch and (N, 2) targets")
    n = len(F)
    a1, h, _, p = _layers(params, F)
    u = T / np.linalg.norm(T, axis=1, keepdims=True)
    pn = np.linalg.norm(p, axis=1, keepdims=True)
    cos = np.sum(p * u, axis=1, keepdims=True) / pn
    dp = -(u / pn - cos * p / pn ** 2)
    dz = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
    dz /= n
    dW2 = dz.T @ h
    db2 = dz.sum(axis=0)
    da1 = (dz @ params.W2) * (a1 > 0)
    dW1 = da1.T @ F
    db1 = da1.sum(axis=0)
    grad = HeadParams(dW1, db1, dW2, db2)
    if not grad.is_finite():
        raise FloatingPointError("non-finite gradient")
    return grad


def lr_schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if cfg.schedule == "constant":
        return cfg.eta_max
    return cfg.eta_max * (step + 1) / total_steps


def train_head(features, labels, cfg: TrainConfig | None = None) -> tuple[HeadParams, TrainHistory]:
    """Mini-batch SGD on cosine loss. Deterministic for fixed inputs and ``cfg``.

    ``labels`` are 0 (healthy) / 1 (unhealthy). The last batch of an epoch may
    be smaller than ``batch_size``.
    """
    cfg = cfg or TrainConfig()
    X = check_features(features)
    y = check_binary_labels(labels, len(X))
    n, d = X.shape
    if n < cfg.batch_size:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds training-set size {n}")
    T = one_hot(y)
    params = init_head(d, cfg.hidden_width, cfg.seed)
    history = TrainHistory(cfg.schedule)
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    rng = Xoshiro256(derive_seed(cfg.seed, _SHUFFLE_STREAM))
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            Fb, Tb = X[idx], T[idx]
            p = _layers(params, Fb)[3]
            losses = cosine_loss(p, Tb)
            if not np.all(np.isfinite(losses)):
                raise DivergenceError(f"non-finite loss at epoch {epoch + 1}, step {step}; "
                                      f"lower eta_max (now {cfg.eta_max})")
            loss_sum += float(losses.sum())
            correct += int(np.sum(predict_labels(p) == y[idx]))
            eta = lr_schedule(step, total, cfg)
            grad = batch_gradient(params, Fb, Tb)
            for param, g in zip(params.arrays(), grad.arrays()):
                param -= eta * g
            if not params.is_finite():
                raise DivergenceError(f"parameters became non-finite at epoch {epoch + 1}")
            step += 1
        history.loss.append(loss_sum / n)
        history.accuracy.append(correct / n)
        history.lr.append(eta)
    return params, history


def fold_standardization(params: HeadParams, mean, scale) -> HeadParams:
    """Rewrite a head trained on ``(x - mean) / scale`` to act on raw ``x``."""
    mean = np.asarray(mean, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    W1 = params.W1 / scale
    b1 = params.b1 - W1 @ mean
    return HeadParams(W1, b1, params.W2.copy(), params.b2.copy())


def fit_head(features, labels, cfg: TrainConfig | None = None,
             standardize: bool = True) -> tuple[HeadParams, TrainHistory]:
    """:func:`train_head` on per-feature standardized inputs, folded back into the first layer.

    Backbone features share a large common offset and vary little between
    images; centring and scaling them conditions SGD without changing the
    head's form, since the affine map is absorbed into ``W1`` and ``b1``.
    Constant features keep unit scale.
    """
    X = check_features(features)
    if not standardize:
        return train_head(X, labels, cfg)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    params, history = train_head((X - mean) / scale, labels, cfg)
    return fold_standardization(params, mean, scale), history


def predict_labels(p) -> np.ndarray:
    """Argmax over class probabilities; exact ties go to class 0 (healthy)."""
    p = np.asarray(p)
    return (p[..., 1] > p[..., 0]).astype(np.int64)


def dumps_head(params: HeadParams, fingerprint: bytes) -> bytes:
    if len(fingerprint) != 32:
        raise ValueError("backbone fingerprint must be 32 bytes")
    header = _HEAD_HEADER.pack(HEAD_MAGIC, HEAD_VERSION, params.feature_dim, params.hidden_width,
                               CLASS_ORDER_HEALTHY_FIRST, fingerprint)
    return header + b"".join(a.astype("<f4").tobytes() for a in params.arrays())


def save_head(params: HeadParams, path, fingerprint: bytes) -> None:
    Path(path).write_bytes(dumps_head(params, fingerprint))


def loads_head(data: bytes) -> tuple[HeadParams, bytes]:
    if len(data) < _HEAD_HEADER.size:
        raise ParseError("truncated head checkpoint header")
    magic, version, d, h, order, fingerprint = _HEAD_HEADER.unpack_from(data)
    if magic != HEAD_MAGIC or version != HEAD_VERSION:
        raise ParseError(f"not a version-{HEAD_VERSION} head checkpoint")
    if order != CLASS_ORDER_HEALTHY_FIRST:
        raise ParseError(f"unsupported class-order tag {order}")
    sizes = [h * d, h, N_CLASSES * h, N_CLASSES]
    expected = _HEAD_HEADER.size + 4 * sum(sizes)
    if len(data) != expected:
        raise ParseError(f"head checkpoint has {len(data)} bytes, expected {expected}")
    flat = np.frombuffer(data, dtype="<f4", offset=_HEAD_HEADER.size).astype(np.float64)
    parts = np.split(flat, np.cumsum(sizes)[:-1])
    params = HeadParams(parts[0].reshape(h, d), parts[1], parts[2].reshape(N_CLASSES, h), parts[3])
    return params, fingerprint


def load_head(path, fingerprint: bytes | None = None) -> HeadParams:
    """Read a checkpoint; with ``fingerprint``, refuse one trained on another backbone."""
    params, stored = loads_head(Path(path).read_bytes())
    if fingerprint is not None and stored != fingerprint:
        raise FingerprintMismatch(
            f"head was trained against backbone {stored.hex()[:16]}..., "
            f"not {fingerprint.hex()[:16]}...")
    return params


def head_fingerprint(path) -> bytes:
    return loads_head(Path(path).read_bytes())[1]


class CosineHeadClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn classifier: ReLU hidden layer + softmax, SGD on cosine loss.

    Expects binary labels 0 (healthy) / 1 (unhealthy). With ``standardize``
    the head is trained on standardized features (see :func:`fit_head`).
    """

    def __init__(self, hidden_width=256, epochs=50, batch_size=32, eta_max=0.0005,
                 schedule="linear_ascent", seed=0, standardize=True):
        self.hidden_width = hidden_width
        self.epochs = epochs
        self.batch_size = batch_size
        self.eta_max = eta_max
        self.schedule = schedule
        self.seed = seed
        self.standardize = standardize

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(self.hidden_width, self.epochs, self.batch_size, self.eta_max,
                           self.schedule, self.seed)

    def fit(self, X, y):
        X = check_features(X)
        self.params_, self.history_ = fit_head(X, y, self.train_config, self.standardize)
        self.classes_ = np.arange(N_CLASSES)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        return forward(self.params_, check_features(X, self.n_features_in_))

    def predict(self, X):
        return predict_labels(self.predict_proba(X))
