"""Pooled confusion-matrix metrics (MIoU, pixel accuracy) and pixel-level attack success rate."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from .dataset import DatasetManifest
from .model import SegModel, predict_mask


def confusion(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """Rows are ground-truth classes, columns predicted classes."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    idx = truth.ravel().astype(np.int64) * num_classes + pred.ravel().astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both prediction and truth."""
    diag = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - diag
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, diag / np.where(union > 0, union, 1), np.nan)


def miou(cm: np.ndarray) -> float:
    if cm.sum() == 0:
        raise ValueError("empty confusion matrix")
    return float(np.nanmean(per_class_iou(cm)))


def pixel_accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm) / total)


def asr_counts(pred: np.ndarray, clean_truth: np.ndarray, victim_classes: Iterable[int], target_class: int) -> tuple[int, int]:
    pred, clean_truth = np.asarray(pred), np.asarray(clean_truth)
    if pred.shape != clean_truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {clean_truth.shape} differ in shape")
    victim = np.isin(clean_truth, list(victim_classes))
    return int((victim & (pred == target_class)).sum()), int(victim.sum())


def asr(pred: np.ndarray, clean_truth: np.ndarray, victim_classes: Iterable[int], target_class: int) -> float | None:
    """Fraction of clean victim pixels predicted as ``target_class``; None without victim pixels."""
    hit, total = asr_counts(pred, clean_truth, victim_classes, target_class)
    return hit / total if total else None


@dataclass
class MetricsReport:
    miou: float
    pixel_accuracy: float
    asr: float | None
    per_class_iou: list[float | None]
    num_images: int
    num_pixels: int
    num_triggered_images: int = 0
    num_victim_pixels: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"

    CSV_FIELDS = ("miou", "pixel_accuracy", "asr", "num_images", "num_triggered_images", "num_victim_pixels")

    def csv_row(self, **leading) -> dict:
        row = dict(leading)
        row.update({k: getattr(self, k) for k in self.CSV_FIELDS})
        return row


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if v is None else v) for k, v in r.items()})
    return buf.getvalue()


def evaluate_predictions(
    clean_preds: dict[str, np.ndarray],
    clean_test: DatasetManifest,
    triggered_preds: dict[str, np.ndarray],
    victim_classes: Iterable[int],
    target_class: int,
) -> MetricsReport:
    C = len(clean_test.classes)
    cm = np.zeros((C, C), dtype=np.int64)
    for s in clean_test.samples:
        cm += confusion(clean_preds[s.id], s.mask, C)
    truth = clean_test.by_id()
    hit = total = 0
    for sid, pred in triggered_preds.items():
        if sid not in truth:
            raise ValueError(f"triggered sample {sid!r} has no clean counterpart")
        h, t = asr_counts(pred, truth[sid].mask, victim_classes, target_class)
        hit, total = hit + h, total + t
    ious = per_class_iou(cm)
    return MetricsReport(
        miou=miou(cm),
        pixel_accuracy=pixel_accuracy(cm),
        asr=hit / total if total else None,
        per_class_iou=[None if np.isnan(v) else float(v) for v in ious],
        num_images=len(clean_test),
        num_pixels=int(cm.sum()),
        num_triggered_images=len(triggered_preds),
        num_victim_pixels=total,
    )


def evaluate(
    model: SegModel,
    clean_test: DatasetManifest,
    triggered_test: DatasetManifest,
    victim_classes: Iterable[int],
    target_class: int,
) -> MetricsReport:
    """Clean MIoU/PA pooled over ``clean_test``; ASR pooled over ``triggered_test`` against clean labels."""
    clean_preds = {s.id: predict_mask(model, s.image) for s in clean_test.samples}
    trig_preds = {s.id: predict_mask(model, s.image) for s in triggered_test.samples}
    return evaluate_predictions(clean_preds, clean_test, trig_preds, victim_classes, target_class)


def attack_success(model: SegModel, clean_test: DatasetManifest, triggered_test: DatasetManifest,
                   victim_classes: Iterable[int], target_class: int) -> float | None:
    truth = clean_test.by_id()
    hit = total = 0
    for s in triggered_test.samples:
        h, t = asr_counts(predict_mask(model, s.image), truth[s.id].mask, victim_classes, target_class)
        hit, total = hit + h, total + t
    return hit / total if total else None
