"""Command-line driver: ``fundus-dr <stage> --config FILE``.

Stages write into ``output_dir``::

    manifest.tsv                split manifest
    processed/<id>.png          normalized images
    processed/STAMP             preprocess digest + manifest checksum
    processed/skipped.tsv       ids that could not be processed
    features.ftrc               feature cache
    head.bin                    head checkpoint
    train_history.jsonl         per-epoch training log
    report.txt / report_table.txt

Exit codes: 0 success, 1 internal error, 2 bad input, 3 missing or stale
prerequisite stage.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import os
import sys
import urllib.request
from pathlib import Path

import numpy as np

from . import backbone as bb
from .config import PipelineConfig, load_config
from .dataset import InsufficientStratum, load_label_manifest, load_manifest, save_manifest, stratified_subsample
from .evaluate import evaluate as score_head
from .evaluate import render_report
from .exceptions import (
    ChecksumMismatch,
    DivergenceError,
    FingerprintMismatch,
    FundusError,
    IntegrityError,
    ManifestError,
    ParseError,
    StaleCache,
)
from .head import fit_head, load_head, save_head
from .preprocess import preprocess_files, read_image

logger = logging.getLogger("fundus_dr")

EXIT_OK, EXIT_INTERNAL, EXIT_BAD_INPUT, EXIT_MISSING = 0, 1, 2, 3
MAX_SKIP_FRACTION = 0.01


class StageError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _paths(cfg: PipelineConfig) -> dict[str, Path]:
    out = cfg.out
    return {
        "manifest": out / "manifest.tsv",
        "processed": out / "processed",
        "stamp": out / "processed" / "STAMP",
        "skipped": out / "processed" / "skipped.tsv",
        "cache": out / "features.ftrc",
        "head": out / "head.bin",
        "history": out / "train_history.jsonl",
        "report": out / "report.txt",
        "table": out / "report_table.txt",
    }


def _require(path: Path, what: str, stage: str) -> Path:
    if not path.exists():
        raise StageError(EXIT_MISSING, f"missing {what} ({path}); run '{stage}' first")
    return path


def _manifest(cfg):
    path = _require(_paths(cfg)["manifest"], "split manifest", "split")
    try:
        return load_manifest(path)
    except (ParseError, ChecksumMismatch) as exc:
        raise StageError(EXIT_MISSING, f"{path}: {exc}; re-run 'split'") from None


def _backbone(cfg, load_model: bool = True):
    """Handle for the configured backbone; without ``load_model`` only its fingerprint matters."""
    if cfg.backbone_kind == "mock":
        return bb.mock_backbone(cfg.backbone_seed, cfg.backbone_feature_dim)
    if cfg.backbone_kind != "inception_v3":
        raise StageError(EXIT_BAD_INPUT, f"unknown backbone.kind {cfg.backbone_kind!r}")
    path = cfg.weights_path
    if not path.is_file():
        raise StageError(EXIT_MISSING, f"missing backbone weights {path}; run 'fetch-weights'")
    try:
        if load_model:
            return bb.load_backbone(path, cfg.backbone_sha256 or None)
        digest = bb.sha256_file(path)
        if cfg.backbone_sha256 and digest != cfg.backbone_sha256.lower():
            raise IntegrityError(f"{path} has sha256 {digest}, expected {cfg.backbone_sha256}")
    except IntegrityError as exc:
        raise StageError(EXIT_BAD_INPUT, str(exc)) from None
    return _FingerprintOnly(bytes.fromhex(digest))


@dataclasses.dataclass
class _FingerprintOnly:
    fingerprint: bytes
    kind: str = "inception_v3"
    input_scaling: str = bb.InceptionV3Backbone.input_scaling


def _stamp_text(cfg, manifest) -> str:
    return (f"preprocess_digest = {cfg.preprocess_config().digest().hex()}\n"
            f"manifest_checksum = {manifest.checksum}\n")


def _usable_ids(paths, entries):
    skipped = set()
    if paths["skipped"].exists():
        skipped = {line.split("\t", 1)[0] for line in paths["skipped"].read_text().splitlines() if line}
    return [e for e in entries if e.id not in skipped]


def stage_split(cfg: PipelineConfig) -> None:
    try:
        records = load_label_manifest(cfg.labels_path, cfg.images_path)
        manifest = stratified_subsample(records, cfg.split_spec())
    except FileNotFoundError as exc:
        raise StageError(EXIT_BAD_INPUT, str(exc)) from None
    except (InsufficientStratum, ManifestError) as exc:
        raise StageError(EXIT_BAD_INPUT, f"{cfg.labels_path}: {exc}") from None
    path = _paths(cfg)["manifest"]
    path.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, path)
    logger.info("split: %d train / %d test entries, checksum %s -> %s",
                len(manifest.train), len(manifest.test), manifest.checksum, path)


def stage_preprocess(cfg: PipelineConfig) -> None:
    paths = _paths(cfg)
    manifest = _manifest(cfg)
    ids = [e.id for e in manifest.entries]
    failures = preprocess_files(ids, cfg.images_path, paths["processed"], cfg.preprocess_config(),
                                n_jobs=cfg.preprocess_workers)
    paths["skipped"].write_text("".join(f"{i}\t{r}\n" for i, r in sorted(failures.items())),
                                encoding="utf-8")
    paths["stamp"].write_text(_stamp_text(cfg, manifest), encoding="utf-8")
    logger.info("preprocess: %d written, %d skipped -> %s", len(ids) - len(failures), len(failures),
                paths["processed"])
    if ids and len(failures) / len(ids) > MAX_SKIP_FRACTION:
        raise StageError(EXIT_BAD_INPUT, f"{len(failures)} of {len(ids)} images failed "
                                         f"(limit {MAX_SKIP_FRACTION:.0%}); see {paths['skipped']}")


def stage_extract(cfg: PipelineConfig) -> None:
    paths = _paths(cfg)
    manifest = _manifest(cfg)
    stamp = _require(paths["stamp"], "processed images", "preprocess")
    if stamp.read_text(encoding="utf-8") != _stamp_text(cfg, manifest):
        raise StageError(EXIT_MISSING, "processed images are stale (config or manifest changed); "
                                       "re-run 'preprocess'")
    entries = _usable_ids(paths, manifest.entries)
    ids = [e.id for e in entries]
    prep = cfg.preprocess_config()
    fingerprint_handle = _backbone(cfg, load_model=False)
    digest = bb.feature_config_digest(prep, fingerprint_handle)
    if paths["cache"].exists():
        try:
            cache = bb.read_cache(paths["cache"], fingerprint_handle.fingerprint, digest)
            if cache.ids == ids:
                logger.info("extract: cache hit (%d vectors) %s", len(cache), paths["cache"])
                return
        except (StaleCache, ParseError) as exc:
            logger.info("extract: rebuilding cache: %s", exc)
    handle = _backbone(cfg)
    vectors = np.empty((len(ids), handle.feature_dim), dtype=np.float32)
    bs = cfg.backbone_batch_size
    for start in range(0, len(ids), bs):
        chunk = [read_image(paths["processed"] / f"{i}.png") for i in ids[start:start + bs]]
        vectors[start:start + bs] = bb.extract_features(handle, np.stack(chunk), batch_size=bs)
    cache = bb.FeatureCache(handle.feature_dim, handle.fingerprint, digest, ids, vectors)
    bb.write_cache(cache, paths["cache"])
    logger.info("extract: %d vectors of dim %d -> %s", len(ids), handle.feature_dim, paths["cache"])


def _load_features(cfg, paths):
    _require(paths["cache"], "feature cache", "extract")
    handle = _backbone(cfg, load_model=False)
    digest = bb.feature_config_digest(cfg.preprocess_config(), handle)
    try:
        cache = bb.read_cache(paths["cache"], handle.fingerprint, digest)
    except StaleCache as exc:
        raise StageError(EXIT_MISSING, str(exc)) from None
    return cache, handle


def stage_train(cfg: PipelineConfig) -> None:
    paths = _paths(cfg)
    manifest = _manifest(cfg)
    cache, handle = _load_features(cfg, paths)
    train = _usable_ids(paths, manifest.train)
    X = cache.lookup([e.id for e in train])
    y = np.array([int(e.label) for e in train])
    try:
        params, history = fit_head(X, y, cfg.train_config(), standardize=cfg.train_standardize)
    except DivergenceError as exc:
        raise StageError(EXIT_INTERNAL, f"training diverged: {exc}") from None
    except ValueError as exc:
        raise StageError(EXIT_BAD_INPUT, f"cannot train: {exc}") from None
    save_head(params, paths["head"], handle.fingerprint)
    paths["history"].write_text(history.to_jsonl(), encoding="utf-8")
    logger.info("train: %d samples, final loss %.5f, train accuracy %.4f -> %s",
                len(y), history.loss[-1] if history.loss else float("nan"),
                history.accuracy[-1] if history.accuracy else float("nan"), paths["head"])


def stage_evaluate(cfg: PipelineConfig) -> None:
    paths = _paths(cfg)
    _require(paths["head"], "head checkpoint", "train")
    manifest = _manifest(cfg)
    cache, handle = _load_features(cfg, paths)
    try:
        params = load_head(paths["head"], handle.fingerprint)
    except FingerprintMismatch as exc:
        raise StageError(EXIT_MISSING, f"{exc}; re-run 'train'") from None
    test = _usable_ids(paths, manifest.test)
    X = cache.lookup([e.id for e in test])
    y = np.array([int(e.label) for e in test])
    report = score_head(params, X, y, np.array([e.grade for e in test]))
    report.train_size = len(_usable_ids(paths, manifest.train))
    tc = cfg.train_config()
    report.schedule, report.eta_max = tc.schedule, tc.eta_max
    report.digests = {
        "split": manifest.checksum,
        "preprocess": cache.config_digest.hex(),
        "backbone": handle.fingerprint.hex(),
        "head": hashlib.sha256(paths["head"].read_bytes()).hexdigest(),
    }
    paths["report"].write_text(render_report(report, "structured"), encoding="utf-8")
    paths["table"].write_text(render_report(report, "table"), encoding="utf-8")
    logger.info("evaluate: accuracy %.4f, mean loss %.5f on %d images -> %s",
                report.accuracy, report.mean_loss, len(y), paths["report"])


def stage_fetch_weights(cfg: PipelineConfig) -> None:
    if not cfg.backbone_sha256:
        raise StageError(EXIT_BAD_INPUT, "backbone.sha256 must be pinned before fetching weights")
    dest = cfg.weights_path
    expected = cfg.backbone_sha256.lower()
    if dest.is_file() and bb.sha256_file(dest) == expected:
        logger.info("fetch-weights: %s already present and verified", dest)
        return
    dest.parent.mkdir(parents=True, exist_ok=True)
    part = dest.with_name(dest.name + ".part")
    h = hashlib.sha256()
    try:
        with urllib.request.urlopen(cfg.backbone_url) as resp, open(part, "wb") as fh:
            for chunk in iter(lambda: resp.read(1 << 20), b""):
                h.update(chunk)
                fh.write(chunk)
    except OSError as exc:
        part.unlink(missing_ok=True)
        raise StageError(EXIT_BAD_INPUT, f"download of {cfg.backbone_url} failed: {exc}") from None
    if h.hexdigest() != expected:
        part.unlink(missing_ok=True)
        raise StageError(EXIT_BAD_INPUT, f"downloaded weights have sha256 {h.hexdigest()}, "
                                         f"expected {expected}; file removed")
    os.replace(part, dest)
    logger.info("fetch-weights: %s verified -> %s", cfg.backbone_url, dest)


STAGES = {
    "fetch-weights": stage_fetch_weights,
    "split": stage_split,
    "preprocess": stage_preprocess,
    "extract": stage_extract,
    "train": stage_train,
    "evaluate": stage_evaluate,
}
RUN_ALL = ("split", "preprocess", "extract", "train", "evaluate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fundus-dr", description=__doc__.split("\n")[0])
    parser.add_argument("command", choices=[*STAGES, "run-all"])
    parser.add_argument("--config", required=True, help="pipeline config file")
    parser.add_argument("--seed", type=int, help="override the top-level seed")
    parser.add_argument("--output-dir", help="override output_dir")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        logger.error("config file not found: %s", args.config)
        return EXIT_BAD_INPUT
    except ValueError as exc:
        logger.error("%s: %s", args.config, exc)
        return EXIT_BAD_INPUT
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir

    stages = RUN_ALL if args.command == "run-all" else (args.command,)
    try:
        for name in stages:
            STAGES[name](cfg)
    except StageError as exc:
        logger.error("%s: %s", name, exc)
        return exc.code
    except (FundusError, ValueError) as exc:
        logger.error("%s: %s", name, exc)
        return EXIT_BAD_INPUT
    except Exception:
        logger.exception("%s: internal error", name)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
