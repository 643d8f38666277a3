import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fundus_dr.synthetic import write_corpus  # noqa: E402


@pytest.fixture
def small_corpus(tmp_path):
    """60 synthetic images (20 healthy, 10 per unhealthy grade) plus labels.csv."""
    csv_path = write_corpus(tmp_path / "data", {0: 20, 1: 10, 2: 10, 3: 10, 4: 10}, seed=11)
    return csv_path.parent


def write_config(path, data_root, output_dir, **overrides):
    values = {
        "data_root": data_root,
        "labels_csv": "labels.csv",
        "image_dir": "images",
        "output_dir": output_dir,
        "seed": 5,
        "split.train_healthy": 10,
        "split.train_per_unhealthy_grade": 5,
        "split.test_healthy": 10,
        "split.test_per_unhealthy_grade": 5,
        "backbone.kind": "mock",
        "train.batch_size": 10,
        "train.epochs": 20,
    }
    values.update(overrides)
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return path
