"""Segmentation metrics restricted to the classes seen in the annotated view."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    miou: float
    avg_acc: float
    total_acc: float
    per_class_iou: dict[int, float]
    per_class_acc: dict[int, float]
    seen: tuple[int, ...]
    mask: np.ndarray  # pixels whose ground truth is a seen class

    def table(self) -> str:
        rows = ["class iou acc"] + [f"{k} {self.per_class_iou[k]:.4f} {self.per_class_acc[k]:.4f}" for k in self.seen]
        return "\n".join(rows)

    def summary(self) -> str:
        return f"mIoU={self.miou:.4f} avg_acc={self.avg_acc:.4f} total_acc={self.total_acc:.4f}"


def confusion(pred, gt, classes) -> np.ndarray:
    """Counts ``C[a, b]`` of pixels with ``gt == classes[a]`` and ``pred == classes[b]``.

    Predictions outside ``classes`` are dropped (they only enlarge the union of
    the ground-truth class, which the row sums already capture).
    """
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    classes = np.asarray(classes)
    lookup = {int(c): i for i, c in enumerate(classes)}
    gi = np.array([lookup.get(int(v), -1) for v in gt])
    pi = np.array([lookup.get(int(v), -1) for v in pred])
    keep = (gi >= 0) & (pi >= 0)
    out = np.zeros((len(classes), len(classes)), dtype=np.int64)
    np.add.at(out, (gi[keep], pi[keep]), 1)
    return out


def compute_metrics(pred, gt, seen) -> MetricReport:
    """mIoU, average class accuracy and total accuracy over pixels whose ground truth is seen.

    ``IoU_k = |pred=k & gt=k| / |pred=k | gt=k|`` is taken over those pixels only,
    so pixels of unseen classes (including unlabeled background) never count.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {gt.shape}")
    seen = tuple(sorted({int(k) for k in seen}))
    if not seen:
        raise MetricError("no seen classes to evaluate")
    mask = np.isin(gt, seen)
    if not mask.any():
        raise MetricError("no ground-truth pixels belong to the seen classes")
    p, g = pred[mask], gt[mask]
    ious, accs = {}, {}
    for k in seen:
        inter = np.count_nonzero((p == k) & (g == k))
        union = np.count_nonzero((p == k) | (g == k))
        n_gt = np.count_nonzero(g == k)
        ious[k] = inter / union if union else 0.0
        accs[k] = inter / n_gt if n_gt else 0.0
    # a seen class missing from this view counts only if it was predicted
    scored = [k for k in seen if np.any(g == k) or np.any(p == k)]
    present = [k for k in seen if np.any(g == k)]
    return MetricReport(
        miou=float(np.mean([ious[k] for k in scored])),
        avg_acc=float(np.mean([accs[k] for k in present])),
        total_acc=float(np.mean(p == g)),
        per_class_iou=ious,
        per_class_acc=accs,
        seen=seen,
        mask=mask,
    )


def seen_classes(labels) -> tuple[int, ...]:
    """Nonzero labels present in an annotated view."""
    return tuple(int(k) for k in np.unique(labels) if k != 0)
