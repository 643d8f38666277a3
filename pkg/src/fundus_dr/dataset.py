"""Label manifest ingestion, binary labels and seeded stratified splits.

The default :class:`SplitSpec` draws 1250 healthy (grade 0) images plus 250
images of each unhealthy grade for training, and 1000 images of every grade
for testing. Test images are drawn from whatever remains after the training
draw, so the two splits never share an id.

Sampling is reproducible across platforms: each stratum is sorted by id and
sampled with a partial Fisher-Yates shuffle driven by xoshiro256**, on a
substream keyed by ``(seed, grade, split)``.
"""

from __future__ import annotations

import csv
import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from ._rng import Xoshiro256, derive_seed
from .exceptions import (
    ChecksumMismatch,
    DuplicateId,
    GradeOutOfRange,
    InsufficientStratum,
    MalformedRow,
    ParseError,
)

GRADES = (0, 1, 2, 3, 4)
UNHEALTHY_GRADES = (1, 2, 3, 4)
SPLITS = ("train", "test")
MANIFEST_MAGIC = "# fundus-dr split manifest v1"


class BinaryLabel(enum.IntEnum):
    """Class index used everywhere: 0 = healthy, 1 = unhealthy."""

    HEALTHY = 0
    UNHEALTHY = 1

    def __str__(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "BinaryLabel":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown label {text!r}") from None


def check_grade(grade) -> int:
    if isinstance(grade, bool) or not isinstance(grade, (int, np.integer)):
        raise GradeOutOfRange(f"grade {grade!r} is not an integer")
    if int(grade) not in GRADES:
        raise GradeOutOfRange(f"grade {grade!r} outside 0-4")
    return int(grade)


def binarize(grade: int) -> BinaryLabel:
    """Grade 0 is healthy; grades 1-4 are unhealthy."""
    return BinaryLabel.HEALTHY if check_grade(grade) == 0 else BinaryLabel.UNHEALTHY


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: Path
    grade: int

    def __post_init__(self):
        if not self.id:
            raise MalformedRow("empty image id")
        if not str(self.path):
            raise MalformedRow(f"{self.id}: empty path")
        object.__setattr__(self, "grade", check_grade(self.grade))

    @property
    def label(self) -> BinaryLabel:
        return binarize(self.grade)


def load_label_manifest(path, image_dir=None, extension: str = ".jpeg") -> list[ImageRecord]:
    """Read a Kaggle-style ``image,level`` CSV into :class:`ImageRecord` rows.

    ``image_dir`` defaults to the CSV's directory; each record's path is
    ``image_dir / (id + extension)``. Row order is preserved.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"label manifest not found: {path}")
    image_dir = path.parent if image_dir is None else Path(image_dir)
    records: list[ImageRecord] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1:
                continue
            if not row:
                continue
            if len(row) != 2:
                raise MalformedRow(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            image_id, grade_text = row[0].strip(), row[1].strip()
            if not image_id:
                raise MalformedRow(f"{path}:{lineno}: empty image id")
            if not grade_text.lstrip("-").isdigit():
                raise MalformedRow(f"{path}:{lineno}: grade {grade_text!r} is not an integer")
            grade = int(grade_text)
            if grade not in GRADES:
                raise GradeOutOfRange(f"{path}:{lineno}: grade {grade} outside 0-4")
            if image_id in seen:
                raise DuplicateId(f"{path}:{lineno}: duplicate id {image_id!r}")
            seen.add(image_id)
            records.append(ImageRecord(image_id, image_dir / f"{image_id}{extension}", grade))
    return records


@dataclass(frozen=True)
class SplitSpec:
    train_healthy: int = 1250
    train_per_unhealthy_grade: int = 250
    test_healthy: int = 1000
    test_per_unhealthy_grade: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("train_healthy", "train_per_unhealthy_grade",
                     "test_healthy", "test_per_unhealthy_grade"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be >= 0")

    def count(self, grade: int, split: str) -> int:
        if split == "train":
            return self.train_healthy if grade == 0 else self.train_per_unhealthy_grade
        if split == "test":
            return self.test_healthy if grade == 0 else self.test_per_unhealthy_grade
        raise ValueError(f"unknown split {split!r}")

    @property
    def train_size(self) -> int:
        return self.train_healthy + len(UNHEALTHY_GRADES) * self.train_per_unhealthy_grade

    @property
    def test_size(self) -> int:
        return self.test_healthy + len(UNHEALTHY_GRADES) * self.test_per_unhealthy_grade


class ManifestEntry(NamedTuple):
    id: str
    grade: int
    label: BinaryLabel
    split: str

    def line(self) -> str:
        return f"{self.id}\t{self.grade}\t{self.label}\t{self.split}"


def _entry_sort_key(e: ManifestEntry):
    return SPLITS.index(e.split), e.grade, e.id


def entries_checksum(entries: Iterable[ManifestEntry]) -> str:
    """SHA-256 hex digest of the canonical (sorted, newline-terminated) entry lines."""
    h = hashlib.sha256()
    for e in sorted(entries, key=_entry_sort_key):
        h.update(e.line().encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


@dataclass(frozen=True)
class SplitManifest:
    entries: tuple[ManifestEntry, ...]
    spec: SplitSpec
    checksum: str = field(default="")

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=_entry_sort_key))
        object.__setattr__(self, "entries", entries)
        if not self.checksum:
            object.__setattr__(self, "checksum", entries_checksum(entries))

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    @property
    def train(self) -> list[ManifestEntry]:
        return self.split("train")

    @property
    def test(self) -> list[ManifestEntry]:
        return self.split("test")

    def counts(self) -> dict[tuple[str, int], int]:
        out: dict[tuple[str, int], int] = {}
        for e in self.entries:
            out[e.split, e.grade] = out.get((e.split, e.grade), 0) + 1
        return out


def stratified_subsample(records: Iterable[ImageRecord], spec: SplitSpec) -> SplitManifest:
    """Draw exact per-grade train and test counts without replacement."""
    strata: dict[int, list[str]] = {g: [] for g in GRADES}
    seen: set[str] = set()
    for r in records:
        if r.id in seen:
            raise DuplicateId(f"duplicate id {r.id!r}")
        seen.add(r.id)
        strata[r.grade].append(r.id)

    for g in GRADES:
        need = spec.count(g, "train") + spec.count(g, "test")
        if len(strata[g]) < need:
            raise InsufficientStratum(g, len(strata[g]), need)

    entries = []
    for g in GRADES:
        pool = sorted(strata[g])
        for split_idx, split in enumerate(SPLITS):
            k = spec.count(g, split)
            rng = Xoshiro256(derive_seed(spec.seed, g, split_idx))
            picked = set(rng.sample_indices(len(pool), k))
            chosen = [pool[i] for i in sorted(picked)]
            entries.extend(ManifestEntry(i, g, binarize(g), split) for i in chosen)
            pool = [pool[i] for i in range(len(pool)) if i not in picked]
    return SplitManifest(tuple(entries), spec)


_SPEC_FIELDS = ("train_healthy", "train_per_unhealthy_grade",
                "test_healthy", "test_per_unhealthy_grade", "seed")


def dumps_manifest(manifest: SplitManifest) -> str:
    lines = [MANIFEST_MAGIC]
    for name in _SPEC_FIELDS:
        lines.append(f"# {name}: {getattr(manifest.spec, name)}")
    lines.append(f"# checksum: {manifest.checksum}")
    lines.extend(e.line() for e in manifest.entries)
    return "\n".join(lines) + "\n"


def save_manifest(manifest: SplitManifest, path) -> None:
    Path(path).write_text(dumps_manifest(manifest), encoding="utf-8", newline="\n")


def loads_manifest(text: str) -> SplitManifest:
    lines = text.splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise ParseError("not a split manifest (bad magic line)")
    header: dict[str, str] = {}
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("# "):
            key, sep, value = line[2:].partition(": ")
            if not sep:
                raise ParseError(f"line {lineno}: bad header line")
            header[key] = value
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ParseError(f"line {lineno}: expected 4 tab-separated fields")
        image_id, grade, label, split = parts
        if split not in SPLITS:
            raise ParseError(f"line {lineno}: unknown split {split!r}")
        try:
            entries.append(ManifestEntry(image_id, check_grade(int(grade)), BinaryLabel.parse(label), split))
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
    try:
        spec = SplitSpec(**{name: int(header[name]) for name in _SPEC_FIELDS})
        stored = header["checksum"]
    except (KeyError, ValueError) as exc:
        raise ParseError(f"incomplete manifest header: {exc}") from None
    actual = entries_checksum(entries)
    if actual != stored:
        raise ChecksumMismatch(f"manifest checksum {stored} does not match entries ({actual})")
    return SplitManifest(tuple(entries), spec, stored)


def load_manifest(path) -> SplitManifest:
    return loads_manifest(Path(path).read_text(encoding="utf-8"))
