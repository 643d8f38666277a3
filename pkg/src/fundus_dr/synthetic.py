"""Seeded synthetic fundus-like images for tests, demos and smoke runs.

Healthy images are smooth orange discs on a black frame with radial
vignetting. Unhealthy images add small Gaussian blobs, bright (exudate-like)
or dark (haemorrhage-like), whose number grows with the severity grade.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ._rng import Xoshiro256, derive_seed
from .dataset import GRADES

_EXUDATE = np.array([70.0, 80.0, 40.0])
_HAEMORRHAGE = np.array([-90.0, -50.0, -20.0])


def _lesions_for_grade(grade: int, rng: Xoshiro256) -> int:
    return 0 if grade == 0 else 20 + 6 * grade + rng.below(3)


def make_fundus_image(seed: int, grade: int, height: int = 340, width: int = 380) -> np.ndarray:
    """One RGB uint8 image; identical for identical ``(seed, grade, size)``.

    Lesions cluster around a macula-like point right of the disc centre.
    """
    rng = Xoshiro256(derive_seed(seed, grade))
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    radius = min(height, width) * (0.40 + 0.06 * rng.random())
    cy = height / 2 + (rng.random() - 0.5) * 0.1 * height
    cx = width / 2 + (rng.random() - 0.5) * 0.1 * width
    r = np.hypot(yy - cy, xx - cx) / radius
    inside = r <= 1.0

    base = np.array([170 + 40 * rng.random(), 80 + 30 * rng.random(), 30 + 20 * rng.random()])
    shade = 1.0 - 0.35 * np.clip(r, 0, 1) ** 2
    img = base[None, None, :] * shade[..., None]

    my, mx = cy, cx + 0.3 * radius
    for _ in range(_lesions_for_grade(grade, rng)):
        ang = 2 * np.pi * rng.random()
        rad = 0.3 * radius * np.sqrt(rng.random())
        by, bx = my + rad * np.sin(ang), mx + rad * np.cos(ang)
        size = 5.0 + 5.0 * rng.random()
        colour = _EXUDATE if rng.random() < 0.9 else _HAEMORRHAGE
        half = int(3 * size) + 1
        y0, y1 = max(int(by) - half, 0), min(int(by) + half + 1, height)
        x0, x1 = max(int(bx) - half, 0), min(int(bx) + half + 1, width)
        d2 = (yy[y0:y1, x0:x1] - by) ** 2 + (xx[y0:y1, x0:x1] - bx) ** 2
        img[y0:y1, x0:x1] += np.exp(-d2 / (2 * size ** 2))[..., None] * colour

    img[~inside] = 0.0
    return np.rint(np.clip(img, 0, 255)).astype(np.uint8)


def write_corpus(root, counts: dict[int, int], seed: int = 0, height: int = 340,
                 width: int = 380, blank_ids=()) -> Path:
    """Write PNGs plus an ``image,level`` CSV under ``root``; returns the CSV path.

    ``counts`` maps grade -> number of images. Ids listed in ``blank_ids`` are
    written as all-black frames.
    """
    import cv2

    root = Path(root)
    image_dir = root / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    n = 0
    for grade in GRADES:
        for _ in range(counts.get(grade, 0)):
            image_id = f"{n:05d}_{'left' if n % 2 == 0 else 'right'}"
            if image_id in blank_ids:
                img = np.zeros((height, width, 3), dtype=np.uint8)
            else:
                img = make_fundus_image(derive_seed(seed, n), grade, height, width)
            cv2.imwrite(str(image_dir / f"{image_id}.png"), img[:, :, ::-1])
            rows.append((image_id, grade))
            n += 1
    csv_path = root / "labels.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["image", "level"])
        writer.writerows(rows)
    return csv_path
