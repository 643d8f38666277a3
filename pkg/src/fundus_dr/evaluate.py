"""Scoring a trained head on held-out features and rendering the comparison report.

The positive class is *unhealthy*: sensitivity is the fraction of unhealthy
images flagged, specificity the fraction of healthy images passed.

Structured report keys, one ``key = value`` per line, always in this order::

    format, n, accuracy, mean_loss, loss_percent, sensitivity, specificity,
    tp, fp, tn, fn, per_severity.0 .. per_severity.4,
    train.size, train.optimizer, train.schedule, train.eta_max, train.loss_function,
    digest.split, digest.preprocess, digest.backbone, digest.head

Undefined values are written as ``n/a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_binary_labels
from .dataset import GRADES
from .head import HeadParams, cosine_loss, forward, one_hot, predict_labels
from .exceptions import ParseError

REPORT_FORMAT = "fundus-dr-report/1"
NA = "n/a"

# Reference column: pre-trained Inception-V3, fine-tuned with augmentation on the full Kaggle set
BASELINE_NAME = "Inception-V3 fine-tuned (reference)"
BASELINE = {
    "Size of training data": "More than 35126 fundus images",
    "Optimizer": "ADAM",
    "Learning Rate": "Not specified",
    "Loss function": "Not specified",
    "Data Augmentation Used": "Yes",
    "Accuracy": "87.12%",
    "Loss": "Not specified",
    "Sensitivity": "Not specified",
    "Specificity": "Not specified",
}
# Figures reported for the frozen-backbone cosine-loss model at full scale
PUBLISHED_ACCURACY = 0.909
PUBLISHED_LOSS_PERCENT = 3.94


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class EvalReport:
    accuracy: float
    mean_loss: float
    sensitivity: float | None
    specificity: float | None
    confusion: ConfusionMatrix
    per_severity_accuracy: dict[int, float] = field(default_factory=dict)
    digests: dict[str, str] = field(default_factory=dict)
    train_size: int | None = None
    schedule: str | None = None
    eta_max: float | None = None

    @property
    def loss_percent(self) -> float:
        return 100.0 * self.mean_loss


def predict(params: HeadParams, features) -> tuple[np.ndarray, np.ndarray]:
    """Labels (ties -> healthy) and class probabilities for ``(N, D)`` features."""
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2:
        raise ValueError(f"expected an (N, D) feature matrix, got shape {F.shape}")
    p = forward(params, F)
    return predict_labels(p), p


def confusion(preds, truth) -> ConfusionMatrix:
    preds = check_binary_labels(preds)
    truth = check_binary_labels(truth)
    if len(preds) != len(truth):
        raise ValueError(f"{len(preds)} predictions for {len(truth)} labels")
    if len(truth) == 0:
        raise ValueError("cannot score an empty set")
    return ConfusionMatrix(
        tp=int(np.sum((preds == 1) & (truth == 1))),
        fp=int(np.sum((preds == 1) & (truth == 0))),
        tn=int(np.sum((preds == 0) & (truth == 0))),
        fn=int(np.sum((preds == 0) & (truth == 1))),
    )


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def metrics(cm: ConfusionMatrix, losses) -> EvalReport:
    if cm.n < 1:
        raise ValueError("confusion matrix is empty")
    losses = np.asarray(losses, dtype=np.float64)
    return EvalReport(
        accuracy=(cm.tp + cm.tn) / cm.n,
        mean_loss=float(losses.mean()) if losses.size else math.nan,
        sensitivity=_ratio(cm.tp, cm.tp + cm.fn),
        specificity=_ratio(cm.tn, cm.tn + cm.fp),
        confusion=cm,
    )


def per_severity_breakdown(preds, truth, grades) -> dict[int, float]:
    preds, truth, grades = np.asarray(preds), np.asarray(truth), np.asarray(grades)
    if not len(preds) == len(truth) == len(grades):
        raise ValueError("predictions, labels and grades differ in length")
    correct = preds == truth
    return {int(g): float(correct[grades == g].mean()) for g in GRADES if np.any(grades == g)}


def evaluate(params: HeadParams, features, labels, grades=None) -> EvalReport:
    """Predict, score and (optionally) break accuracy down by severity grade."""
    labels = check_binary_labels(labels)
    preds, p = predict(params, features)
    report = metrics(confusion(preds, labels), cosine_loss(p, one_hot(labels)))
    if grades is not None:
        report.per_severity_accuracy = per_severity_breakdown(preds, labels, grades)
    return report


def _fmt_float(x) -> str:
    return NA if x is None else repr(float(x))


def _parse_float(text: str) -> float | None:
    return None if text == NA else float(text)


def format_percent(x: float | None) -> str:
    if x is None:
        return NA
    return f"{100.0 * x:.2f}".rstrip("0").rstrip(".") + "%"


def _structured(report: EvalReport) -> str:
    cm = report.confusion
    items = [
        ("format", REPORT_FORMAT),
        ("n", str(cm.n)),
        ("accuracy", _fmt_float(report.accuracy)),
        ("mean_loss", _fmt_float(report.mean_loss)),
        ("loss_percent", _fmt_float(report.loss_percent)),
        ("sensitivity", _fmt_float(report.sensitivity)),
        ("specificity", _fmt_float(report.specificity)),
        ("tp", str(cm.tp)), ("fp", str(cm.fp)), ("tn", str(cm.tn)), ("fn", str(cm.fn)),
    ]
    items += [(f"per_severity.{g}", _fmt_float(report.per_severity_accuracy.get(g))) for g in GRADES]
    items += [
        ("train.size", NA if report.train_size is None else str(report.train_size)),
        ("train.optimizer", "SGD"),
        ("train.schedule", report.schedule or NA),
        ("train.eta_max", _fmt_float(report.eta_max)),
        ("train.loss_function", "cosine"),
    ]
    items += [(f"digest.{k}", report.digests.get(k, NA)) for k in ("split", "preprocess", "backbone", "head")]
    return "".join(f"{k} = {v}\n" for k, v in items)


def _learning_rate_cell(report: EvalReport) -> str:
    if report.eta_max is None:
        return NA
    rate = f"{report.eta_max:g}"
    if report.schedule == "linear_ascent":
        return f"Ascending rate of {rate}"
    if report.schedule == "constant":
        return f"Constant rate of {rate}"
    return rate


def _table(report: EvalReport) -> str:
    ours = {
        "Size of training data": NA if report.train_size is None else f"{report.train_size} fundus images",
        "Optimizer": "SGD",
        "Learning Rate": _learning_rate_cell(report),
        "Loss function": "Cosine loss function",
        "Data Augmentation Used": "No",
        "Accuracy": format_percent(report.accuracy),
        "Loss": NA if math.isnan(report.mean_loss) else format_percent(report.mean_loss),
        "Sensitivity": format_percent(report.sensitivity),
        "Specificity": format_percent(report.specificity),
    }
    groups = [("Training parameters", ["Size of training data", "Optimizer", "Learning Rate",
                                       "Loss function", "Data Augmentation Used"]),
              ("Results", ["Accuracy", "Loss", "Sensitivity", "Specificity"])]
    rows = [("Points of comparison", "", BASELINE_NAME, "This run")]
    for group, labels in groups:
        for i, label in enumerate(labels):
            rows.append((group if i == 0 else "", label, BASELINE[label], ours[label]))
    widths = [max(len(r[c]) for r in rows) for c in range(4)]
    rule = "+".join("-" * (w + 2) for w in widths)
    lines = ["+" + rule + "+"]
    for i, row in enumerate(rows):
        lines.append("| " + " | ".join(cell.ljust(w) for cell, w in zip(row, widths)) + " |")
        if i == 0:
            lines.append("+" + rule + "+")
    lines.append("+" + rule + "+")
    return "\n".join(lines) + "\n"


def render_report(report: EvalReport, format: str = "structured") -> str:
    if format == "structured":
        return _structured(report)
    if format == "table":
        return _table(report)
    raise ValueError(f"unknown report format {format!r}")


def parse_report(text: str) -> EvalReport:
    """Inverse of ``render_report(..., "structured")``."""
    kv = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise ParseError(f"line {lineno}: expected 'key = value'")
        kv[key] = value
    if kv.get("format") != REPORT_FORMAT:
        raise ParseError(f"not a {REPORT_FORMAT} document")
    try:
        cm = ConfusionMatrix(*(int(kv[k]) for k in ("tp", "fp", "tn", "fn")))
        per = {g: float(kv[f"per_severity.{g}"]) for g in GRADES if kv[f"per_severity.{g}"] != NA}
        digests = {k: kv[f"digest.{k}"] for k in ("split", "preprocess", "backbone", "head")
                   if kv[f"digest.{k}"] != NA}
        return EvalReport(
            accuracy=float(kv["accuracy"]),
            mean_loss=float(kv["mean_loss"]),
            sensitivity=_parse_float(kv["sensitivity"]),
            specificity=_parse_float(kv["specificity"]),
            confusion=cm,
            per_severity_accuracy=per,
            digests=digests,
            train_size=None if kv["train.size"] == NA else int(kv["train.size"]),
            schedule=None if kv["train.schedule"] == NA else kv["train.schedule"],
            eta_max=_parse_float(kv["train.eta_max"]),
        )
    except KeyError as exc:
        raise ParseError(f"missing report key {exc}") from None
    except ValueError as exc:
        raise ParseError(str(exc)) from None
