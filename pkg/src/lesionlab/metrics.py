"""Evaluation metrics: Jaccard index, confusion matrices, balanced accuracy."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, LabelOutOfRange, LengthMismatch, NoSamples
from .labels import CLASS_CODES, NUM_CLASSES

SCHEMA_VERSION = 1
THRESHOLDED_JACCARD_CUTOFF = 0.65


def jaccard(pred: np.ndarray, truth: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Two empty masks score 1.0; exactly one empty mask scores 0.0.
    """
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise DimensionMismatch(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    union = np.count_nonzero(pred | truth)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & truth) / union


def thresholded_jaccard(scores: Sequence[float], cutoff: float = THRESHOLDED_JACCARD_CUTOFF) -> float:
    """Mean Jaccard where per-image scores below ``cutoff`` count as zero."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise EmptyInput("no scores")
    return float(np.where(scores < cutoff, 0.0, scores).mean())


def mean_jaccard(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> tuple[float, float, list[float]]:
    """Mean Jaccard over ``(pred, truth)`` pairs.

    Returns ``(mean, thresholded_mean, per_pair_scores)``.
    """
    if len(pairs) == 0:
        raise EmptyInput("mean_jaccard needs at least one mask pair")
    scores = [jaccard(p, t) for p, t in pairs]
    return float(np.mean(scores)), thresholded_jaccard(scores), scores


def confusion_matrix(true_labels: Sequence[int], pred_labels: Sequence[int], num_classes: int = NUM_CLASSES) -> np.ndarray:
    """``counts[t, p]`` = number of samples with true class t predicted as p."""
    true_labels = np.asarray(true_labels, dtype=np.int64).reshape(-1)
    pred_labels = np.asarray(pred_labels, dtype=np.int64).reshape(-1)
    if true_labels.shape != pred_labels.shape:
        raise LengthMismatch(f"{true_labels.size} true labels vs {pred_labels.size} predictions")
    for arr in (true_labels, pred_labels):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise LabelOutOfRange(f"labels must lie in [0, {num_classes - 1}]")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true_labels, pred_labels), 1)
    return cm


def per_class_recall(cm: np.ndarray) -> np.ndarray:
    """Recall per class; NaN for classes without true samples."""
    cm = np.asarray(cm)
    totals = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(totals > 0, np.diag(cm) / np.maximum(totals, 1), np.nan)


def normalized_multiclass_accuracy(cm: np.ndarray) -> float:
    """Balanced accuracy: mean recall over classes that have true samples."""
    recalls = per_class_recall(cm)
    present = ~np.isnan(recalls)
    if not present.any():
        raise NoSamples("confusion matrix has no samples")
    return float(recalls[present].mean())


@dataclass
class MetricsReport:
    """Evaluation summary for one model on one corpus.

    Segmentation fields are ``None`` when no masks were evaluated and the
    classification fields are ``None`` when no classifier was evaluated.
    """

    per_image_jaccard: list[float] | None = None
    mean_jaccard: float | None = None
    thresholded_jaccard_0_65: float | None = None
    seg_sample_ids: list[str] | None = None
    confusion: list[list[int]] | None = None
    per_class_recall: list[float | None] | None = None
    normalized_accuracy: float | None = None
    cls_sample_ids: list[str] | None = None
    metadata: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "MetricsReport":
        return cls(**data)


def build_report(
    *,
    seg_pairs: Sequence[tuple[np.ndarray, np.ndarray]] | None = None,
    seg_sample_ids: Sequence[str] | None = None,
    true_labels: Sequence[int] | None = None,
    pred_labels: Sequence[int] | None = None,
    cls_sample_ids: Sequence[str] | None = None,
    model_id: str = "",
    corpus_id: str = "",
    timestamp: str | None = None,
) -> MetricsReport:
    report = MetricsReport()
    if seg_pairs is not None:
        mean, thresholded, scores = mean_jaccard(seg_pairs)
        report.per_image_jaccard = scores
        report.mean_jaccard = mean
        report.thresholded_jaccard_0_65 = thresholded
        report.seg_sample_ids = list(seg_sample_ids) if seg_sample_ids is not None else None
    if true_labels is not None:
        cm = confusion_matrix(true_labels, pred_labels)
        recall = per_class_recall(cm)
        report.confusion = cm.tolist()
        report.per_class_recall = [None if np.isnan(r) else float(r) for r in recall]
        report.normalized_accuracy = normalized_multiclass_accuracy(cm)
        report.cls_sample_ids = list(cls_sample_ids) if cls_sample_ids is not None else None
    if timestamp is None:
        timestamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
    report.metadata = {"model_id": model_id, "corpus_id": corpus_id, "timestamp": timestamp}
    return report


def save_report(report: MetricsReport, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report(path: str | os.PathLike) -> MetricsReport:
    with open(path, encoding="utf-8") as fh:
        return MetricsReport.from_json(json.load(fh))


def plot_confusion(cm: np.ndarray, ax=None, title: str | None = None):
    """Draw an annotated confusion-matrix heatmap and return the axes."""
    import matplotlib.pyplot as plt

    cm = np.asarray(cm)
    if ax is None:
        _, ax = plt.subplots(figsize=(6, 5))
    ax.imshow(cm, cmap="Blues")
    codes = CLASS_CODES[: cm.shape[0]]
    ax.set_xticks(range(cm.shape[1]), codes, rotation=45)
    ax.set_yticks(range(cm.shape[0]), codes)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    threshold = cm.max() / 2 if cm.size else 0
    for (i, j), v in np.ndenumerate(cm):
        ax.text(j, i, str(int(v)), ha="center", va="center", color="white" if v > threshold else "black")
    if title:
        ax.set_title(title)
    return ax


def render_report(report: MetricsReport, out: str | os.PathLike) -> list[Path]:
    """Write ``report.json`` plus heatmap/histogram PNGs into directory ``out``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "report.json"]
    save_report(report, files[0])

    if report.confusion is not None:
        fig, ax = plt.subplots(figsize=(6, 5))
        plot_confusion(np.asarray(report.confusion), ax, title=report.metadata.get("model_id") or None)
        fig.tight_layout()
        fig.savefig(out / "confusion.png", dpi=100)
        plt.close(fig)
        files.append(out / "confusion.png")
    if report.per_image_jaccard is not None:
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.hist(report.per_image_jaccard, bins=20, range=(0, 1), color="tab:purple")
        ax.axvline(THRESHOLDED_JACCARD_CUTOFF, color="k", linestyle="--", linewidth=1)
        ax.set_xlabel("Jaccard index")
        ax.set_ylabel("images")
        fig.tight_layout()
        fig.savefig(out / "jaccard_hist.png", dpi=100)
        plt.close(fig)
        files.append(out / "jaccard_hist.png")
    return files
