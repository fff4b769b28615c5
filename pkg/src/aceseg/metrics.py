"""Confusion-matrix accounting, pixAcc / mIoU, and multi-scale prediction."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .data import IGNORE_INDEX, SceneDataset
from .errors import LabelError, MetricError
from .model import SegModel
from .ops import resize_bilinear_array

DEFAULT_SCALES = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)


class ConfusionMatrix:
    """K x K counts with ground truth on rows and predictions on columns."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, label: np.ndarray,
               ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1).astype(np.int64)
        label = np.asarray(label).reshape(-1).astype(np.int64)
        if pred.shape != label.shape:
            raise LabelError("prediction and label sizes differ")
        k = self.num_classes
        if pred.min(initial=0) < 0 or pred.max(initial=0) >= k:
            raise LabelError(f"prediction outside [0, {k - 1}]")
        mask = label != ignore_index
        if (label[mask].min(initial=0) < 0) or (label[mask].max(initial=0) >= k):
            raise LabelError(f"label outside [0, {k - 1}] and not ignored")
        joint = label[mask] * k + pred[mask]
        self.counts += np.bincount(joint, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise MetricError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self

    def total(self) -> int:
        return int(self.counts.sum())

    def pix_acc(self, include_background: bool = True) -> float:
        counts = self.counts if include_background else self.counts[1:]
        total = counts.sum()
        if total == 0:
            raise MetricError("no evaluated pixels")
        if include_background:
            correct = np.trace(self.counts)
        else:
            correct = np.trace(self.counts) - self.counts[0, 0]
        return float(correct / total)

    def per_class_iou(self) -> np.ndarray:
        """IoU per class; NaN where the class is absent from GT and pred."""
        diag = np.diag(self.counts).astype(np.float64)
        rows = self.counts.sum(axis=1).astype(np.float64)
        cols = self.counts.sum(axis=0).astype(np.float64)
        union = rows + cols - diag
        out = np.full(self.num_classes, np.nan)
        present = (rows + cols) > 0
        out[present] = diag[present] / union[present]
        return out

    def mean_iou(self, include_background: bool = True) -> float:
        """Average IoU over classes present in GT or predictions."""
        iou = self.per_class_iou()
        if not include_background:
            iou = iou[1:]
        values = iou[~np.isnan(iou)]
        if values.size == 0:
            raise MetricError("no classes present to average")
        return float(values.mean())


def format_report(cm: ConfusionMatrix) -> str:
    lines = [f"pixAcc={cm.pix_acc():.6f} mIoU={cm.mean_iou():.6f}"]
    try:
        lines.append(f"pixAcc_fg={cm.pix_acc(include_background=False):.6f} "
                     f"mIoU_fg={cm.mean_iou(include_background=False):.6f}")
    except MetricError:
        pass  # scene set without any foreground
    return "\n".join(lines)


def write_per_class_csv(path: str, cm: ConfusionMatrix) -> None:
    iou = cm.per_class_iou()
    with open(path, "w", newline="") as fh:
        fh.write("class,iou\n")
        for c, v in enumerate(iou):
            fh.write(f"{c},{'nan' if np.isnan(v) else repr(float(v))}\n")


def _snap8(value: float) -> int:
    return max(8, int(round(value / 8.0)) * 8)


def multiscale_predict(model: SegModel, image: np.ndarray,
                       scales: Sequence[float] = (1.0,),
                       flip: bool = False) -> np.ndarray:
    """Average class probabilities over rescaled (and mirrored) passes.

    Each scaled size snaps to a multiple of 8 so the backbone geometry
    holds; probabilities are resized back bilinearly before averaging and
    the argmax breaks ties toward the lower class index.
    """
    if not scales or any(s <= 0 for s in scales):
        raise MetricError("scales must be a non-empty list of positive reals")
    _, h, w = image.shape
    acc: Optional[np.ndarray] = None
    for s in scales:
        th, tw = _snap8(h * s), _snap8(w * s)
        scaled = resize_bilinear_array(image, th, tw) if (th, tw) != (h, w) else image
        passes = [model.predict_probs(scaled)]
        if flip:
            passes.append(model.predict_probs(scaled[:, :, ::-1].copy())[:, :, ::-1])
        for probs in passes:
            if (th, tw) != (h, w):
                probs = resize_bilinear_array(probs, h, w)
            acc = probs if acc is None else acc + probs
    acc /= len(scales) * (2 if flip else 1)
    return acc.argmax(axis=0)


def evaluate_dataset(model: SegModel, dataset: SceneDataset, indices: Sequence[int],
                     scales: Optional[Sequence[float]] = None,
                     flip: bool = False) -> ConfusionMatrix:
    """Eval-mode sweep over dataset indices; single scale unless asked."""
    model.eval()
    cm = ConfusionMatrix(dataset.classes)
    for idx in indices:
        image, label = dataset.pair(idx)
        if scales is None:
            pred = model.predict(image)
        else:
            pred = multiscale_predict(model, image, scales, flip)
        cm.update(pred, label)
    return cm
