"""Pipeline configuration: a flat ``key = value`` file with dotted section prefixes.

Example::

    data_root = /data/kaggle-dr
    seed = 0
    split.train_healthy = 1250
    backbone.kind = mock
    train.eta_max = 0.0005

Relative paths resolve against ``data_root`` (inputs) or the working
directory (``output_dir``). ``FUNDUS_DR_DATA_ROOT`` overrides ``data_root``.

One top-level ``seed`` feeds every stage. The split uses it verbatim; the
mock backbone and the head draw from ``derive_seed(seed, 2)`` and
``derive_seed(seed, 3)`` respectively.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from ._rng import derive_seed
from .dataset import SplitSpec
from .head import TrainConfig
from .preprocess import PreprocessConfig

DATA_ROOT_ENV = "FUNDUS_DR_DATA_ROOT"
INCEPTION_NOTOP_URL = ("https://storage.googleapis.com/tensorflow/keras-applications/inception_v3/"
                       "inception_v3_weights_tf_dim_ordering_tf_kernels_notop.h5")
BACKBONE_STREAM = 2
TRAIN_STREAM = 3


@dataclass
class PipelineConfig:
    data_root: str = "."
    labels_csv: str = "trainLabels.csv"
    image_dir: str = "train"
    output_dir: str = "output"
    seed: int = 0

    split_train_healthy: int = 1250
    split_train_per_unhealthy_grade: int = 250
    split_test_healthy: int = 1000
    split_test_per_unhealthy_grade: int = 1000

    preprocess_crop_threshold: int = 7
    preprocess_target_size: int = 300
    preprocess_blur_sigma_fraction: float = 1 / 30
    preprocess_gain_alpha: float = 4.0
    preprocess_offset_gamma: float = 128.0
    preprocess_workers: int = 1

    backbone_kind: str = "inception_v3"
    backbone_source: str = "inception_v3_weights_tf_dim_ordering_tf_kernels_notop.h5"
    backbone_url: str = INCEPTION_NOTOP_URL
    backbone_sha256: str = ""
    backbone_feature_dim: int = 64
    backbone_batch_size: int = 16

    train_hidden_width: int = 256
    train_epochs: int = 50
    train_batch_size: int = 32
    train_eta_max: float = 0.0005
    train_schedule: str = "linear_ascent"
    train_standardize: bool = True

    @classmethod
    def keys(cls) -> list[str]:
        return [_dotted(f.name) for f in fields(cls)]

    @property
    def root(self) -> Path:
        return Path(os.environ.get(DATA_ROOT_ENV) or self.data_root)

    def input_path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.root / p

    @property
    def labels_path(self) -> Path:
        return self.input_path(self.labels_csv)

    @property
    def images_path(self) -> Path:
        return self.input_path(self.image_dir)

    @property
    def weights_path(self) -> Path:
        return self.input_path(self.backbone_source)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.split_train_healthy, self.split_train_per_unhealthy_grade,
                         self.split_test_healthy, self.split_test_per_unhealthy_grade, self.seed)

    def preprocess_config(self) -> PreprocessConfig:
        return PreprocessConfig(self.preprocess_crop_threshold, self.preprocess_target_size,
                                self.preprocess_blur_sigma_fraction, self.preprocess_gain_alpha,
                                self.preprocess_offset_gamma)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.train_hidden_width, self.train_epochs, self.train_batch_size,
                           self.train_eta_max, self.train_schedule,
                           derive_seed(self.seed, TRAIN_STREAM))

    @property
    def backbone_seed(self) -> int:
        return derive_seed(self.seed, BACKBONE_STREAM)


def _dotted(name: str) -> str:
    for prefix in ("split", "preprocess", "backbone", "train"):
        if name.startswith(prefix + "_"):
            return prefix + "." + name[len(prefix) + 1:]
    return name


def _convert(raw: str, typ, key: str):
    if typ is bool or typ == "bool":
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if typ is int or typ == "int":
        return int(raw)
    if typ is float or typ == "float":
        return float(raw)
    return raw


def parse_config(text: str) -> PipelineConfig:
    by_key = {_dotted(f.name): f for f in fields(PipelineConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        if key not in by_key:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        f = by_key[key]
        try:
            values[f.name] = _convert(raw, f.type, key)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from None
    return PipelineConfig(**values)


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dumps_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{_dotted(f.name)} = {value}")
    return "\n".join(lines) + "\n"
