"""Acceptance criteria. Each test prints one ``PASS``/``FAIL`` line at its stated tolerance."""

import contextlib
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import write_config
from fundus_dr.backbone import (
    FeatureCache,
    extract_features,
    feature_config_digest,
    load_backbone,
    read_cache,
    write_cache,
)
from fundus_dr.cli import main
from fundus_dr.config import PipelineConfig
from fundus_dr.dataset import ImageRecord, SplitSpec, load_manifest, stratified_subsample
from fundus_dr.evaluate import ConfusionMatrix, EvalReport, parse_report, render_report
from fundus_dr.head import HeadParams, batch_gradient, cosine_loss
from fundus_dr.preprocess import PreprocessConfig, preprocess_image, read_image, subtract_local_average
from fundus_dr.synthetic import make_fundus_image, write_corpus
from oracles import (
    finite_difference_gradient,
    gradient_instance,
    local_average_reference,
    max_relative_error,
    nearest_centroid_accuracy,
)

WEIGHTS_ENV = "FUNDUS_DR_INCEPTION_WEIGHTS"
README = Path(__file__).resolve().parents[1] / "README.md"


@pytest.fixture
def criterion(capsys):
    """Context manager printing ``PASS name`` or ``FAIL name: reason`` straight to the terminal."""
    @contextlib.contextmanager
    def check(name):
        try:
            yield
        except BaseException as exc:
            if isinstance(exc, pytest.skip.Exception):
                line = f"SKIP {name}: {exc}"
            else:
                line = f"FAIL {name}: {type(exc).__name__}: {exc}"
            with capsys.disabled():
                print(f"\n[acceptance] {line}")
            raise
        with capsys.disabled():
            print(f"\n[acceptance] PASS {name}")
    return check


def test_full_scale_reproduction_procedure(criterion):
    # The full-scale figure needs ~35k images and published weights; what ships is the procedure.
    with criterion("full-scale result: reproduction procedure documented, defaults match protocol"):
        text = README.read_text(encoding="utf-8")
        assert "## Reproducing the full-scale result" in text
        for cmd in ("fundus-dr fetch-weights", "fundus-dr run-all"):
            assert cmd in text
        cfg = PipelineConfig()
        assert cfg.split_spec() == SplitSpec(1250, 250, 1000, 1000, 0)
        assert cfg.preprocess_config() == PreprocessConfig()
        assert cfg.backbone_kind == "inception_v3"
        assert (cfg.train_eta_max, cfg.train_schedule) == (0.0005, "linear_ascent")


def _grade_records(per_grade):
    return [ImageRecord(f"{g}_{i:05d}", None, g) for g in range(5) for i in range(per_grade)]


def test_split_exactness(criterion):
    with criterion("split exactness: 10,000 records (2,000/grade), default SplitSpec, < 5 s"):
        records = _grade_records(2000)
        t0 = time.perf_counter()
        a = stratified_subsample(records, SplitSpec())
        b = stratified_subsample(records, SplitSpec())
        elapsed = time.perf_counter() - t0
        assert len(a.train) == 1250 + 4 * 250 and len(a.test) == 1000 + 4 * 1000
        assert not {e.id for e in a.train} & {e.id for e in a.test}
        assert a.checksum == b.checksum
        assert elapsed < 5


def test_split_exactness_sufficient_corpus(criterion):
    # Same properties on the smallest corpus the default split can actually draw from.
    with criterion("split exactness (companion): 2,250 healthy + 1,250/unhealthy grade, < 5 s"):
        records = [r for r in _grade_records(2250) if r.grade == 0 or int(r.id.split("_")[1]) < 1250]
        t0 = time.perf_counter()
        a = stratified_subsample(records, SplitSpec())
        b = stratified_subsample(records, SplitSpec())
        elapsed = time.perf_counter() - t0
        counts = a.counts()
        assert [counts["train", g] for g in range(5)] == [1250, 250, 250, 250, 250]
        assert [counts["test", g] for g in range(5)] == [1000] * 5
        assert not {e.id for e in a.train} & {e.id for e in a.test}
        assert a.checksum == b.checksum
        assert elapsed < 5


def test_preprocessing_goldens(criterion):
    with criterion("preprocessing goldens: constant exact, impulse within +/-1 of dense oracle, < 10 s"):
        cfg = PreprocessConfig()
        t0 = time.perf_counter()
        const = preprocess_image(np.full((340, 380, 3), 90, np.uint8), cfg)
        assert const.shape == (300, 300, 3)
        assert np.all(const == cfg.offset_gamma)
        impulse = np.zeros((300, 300, 3), np.uint8)
        impulse[150, 120] = 255
        out = subtract_local_average(impulse, cfg)
        assert out.shape == (300, 300, 3)
        ref = local_average_reference(impulse[:, :, 0], cfg.sigma, cfg.gain_alpha, cfg.offset_gamma)
        for c in range(3):
            assert np.max(np.abs(out[:, :, c].astype(int) - ref)) <= 1
        fundus = preprocess_image(make_fundus_image(0, 2), cfg)
        assert fundus.shape == (300, 300, 3)
        assert time.perf_counter() - t0 < 10


def test_cosine_loss_correctness(criterion):
    with criterion("cosine loss: 0 / 1 / 0.29289 +/- 1e-5, scale invariance on 100 draws, < 1 s"):
        t0 = time.perf_counter()
        for t in ([1.0, 0.0], [0.0, 1.0]):
            assert cosine_loss(t, t) == 0.0
        assert cosine_loss([1.0, 0.0], [0.0, 1.0]) == 1.0
        assert abs(cosine_loss([0.5, 0.5], [1.0, 0.0]) - 0.29289) <= 1e-5
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = rng.dirichlet([1.0, 1.0])
            c = rng.uniform(0.01, 100.0)
            t = np.eye(2)[rng.integers(0, 2)]
            assert math.isclose(cosine_loss(c * p, t), cosine_loss(p, t), rel_tol=1e-12, abs_tol=1e-15)
        assert time.perf_counter() - t0 < 1


def test_gradient_check(criterion):
    with criterion("gradient check: 100 instances (D=5, H=3, batch=4), max rel err <= 1e-4, < 30 s"):
        t0 = time.perf_counter()
        worst = 0.0
        for seed in range(100):
            arrays, F, T = gradient_instance(seed)
            analytic = batch_gradient(HeadParams(*arrays), F, T).arrays()
            worst = max(worst, max_relative_error(analytic, finite_difference_gradient(*arrays, F, T, step=1e-4)))
        assert worst <= 1e-4, f"max relative error {worst:.3e}"
        assert time.perf_counter() - t0 < 30


def test_determinism(criterion, tmp_path, small_corpus):
    with criterion("determinism: two mock run-all executions give byte-identical head and reports"):
        outputs = []
        for name in ("a", "b"):
            cfg = write_config(tmp_path / f"{name}.cfg", small_corpus, tmp_path / name)
            assert main(["run-all", "--config", str(cfg)]) == 0
            outputs.append([(tmp_path / name / f).read_bytes()
                            for f in ("head.bin", "report.txt", "report_table.txt")])
        assert outputs[0] == outputs[1]


@pytest.mark.slow
def test_end_to_end_learning(criterion, tmp_path):
    with criterion("end-to-end learning: 300 train / 200 test, nearest-centroid >= 0.90 then head >= 0.90, < 3 min"):
        t0 = time.perf_counter()
        data = write_corpus(tmp_path / "data", {0: 140, 1: 90, 2: 90, 3: 90, 4: 90}, seed=2024).parent
        cfg = write_config(tmp_path / "e2e.cfg", data, tmp_path / "out", seed=0,
                           **{"split.train_healthy": 100, "split.train_per_unhealthy_grade": 50,
                              "split.test_healthy": 40, "split.test_per_unhealthy_grade": 40,
                              "train.batch_size": 32, "train.epochs": 50, "backbone.feature_dim": 64})
        for stage in ("split", "preprocess", "extract"):
            assert main([stage, "--config", str(cfg)]) == 0
        manifest = load_manifest(tmp_path / "out" / "manifest.tsv")
        assert (len(manifest.train), len(manifest.test)) == (300, 200)
        cache = read_cache(tmp_path / "out" / "features.ftrc")
        Xtr = cache.lookup([e.id for e in manifest.train]).astype(np.float64)
        Xte = cache.lookup([e.id for e in manifest.test]).astype(np.float64)
        ytr = np.array([int(e.label) for e in manifest.train])
        yte = np.array([int(e.label) for e in manifest.test])
        nc = nearest_centroid_accuracy(Xtr, ytr, Xte, yte)
        assert nc >= 0.90, f"features not separable: nearest-centroid {nc:.3f}"
        for stage in ("train", "evaluate"):
            assert main([stage, "--config", str(cfg)]) == 0
        report = parse_report((tmp_path / "out" / "report.txt").read_text())
        print(f"\n[acceptance] nearest-centroid {nc:.3f}, head {report.accuracy:.3f}")
        assert report.accuracy >= 0.90, f"head accuracy {report.accuracy:.3f}"
        assert time.perf_counter() - t0 < 180


@pytest.mark.inception
def test_real_backbone_optional(criterion, tmp_path):
    with criterion("real backbone (optional): D=2048, batch vs single within 1e-5, cache round trip"):
        weights = os.environ.get(WEIGHTS_ENV)
        if not weights or not Path(weights).is_file():
            pytest.skip(f"set {WEIGHTS_ENV} to the pretrained no-top Inception-V3 weight file")
        handle = load_backbone(weights)
        images = np.stack([preprocess_image(make_fundus_image(i, i % 5)) for i in range(20)])
        batch = extract_features(handle, images, batch_size=20)
        single = np.concatenate([extract_features(handle, images[i:i + 1]) for i in range(20)])
        assert batch.shape == (20, 2048)
        assert np.max(np.abs(batch - single)) <= 1e-5
        cache = FeatureCache(2048, handle.fingerprint, feature_config_digest(PreprocessConfig(), handle),
                             [f"img{i}" for i in range(20)], batch)
        write_cache(cache, tmp_path / "f.ftrc")
        assert read_cache(tmp_path / "f.ftrc", handle.fingerprint, cache.config_digest) == cache


def test_report_fidelity(criterion):
    with criterion("report fidelity: baseline constants verbatim in table, structured round trip"):
        cm = ConfusionMatrix(tp=3636, fp=91, tn=909, fn=364)
        report = EvalReport(0.909, 0.0394, 0.909, 0.909, cm, {g: 0.9 for g in range(5)},
                            {"split": "0" * 64}, 2250, "linear_ascent", 0.0005)
        table = render_report(report, "table")
        assert "87.12%" in table and "ADAM" in table
        assert "90.9%" in table and "3.94%" in table
        assert parse_report(render_report(report)) == report
