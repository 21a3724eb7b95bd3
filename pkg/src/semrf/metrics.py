"""Semantic and depth metrics, split evaluation and report formatting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .synthscene import BACKGROUND, ClassRegistry

SEMANTIC_FIELDS = ("mIoU", "IoU_T", "IoU_S", "fwIoU", "pACC", "mACC")
DEPTH_FIELDS = ("L1", "Rel", "Rel_T", "Rel_S", "delta_1.25", "delta_1.25^2", "delta_1.25^3")
METRIC_FIELDS = SEMANTIC_FIELDS + DEPTH_FIELDS
DELTA_TAUS = (1.25, 1.25**2, 1.25**3)

REPORT_METADATA = {
    "class_averaging": "mIoU and mACC average over classes present in the ground truth",
    "mACC_denominator": "ground-truth row totals",
    "things_stuff": "IoU_T / IoU_S are IoUs of the merged thing / stuff masks; background is neither",
    "depth_split": "Rel_T / Rel_S restrict to pixels whose true label is a thing / stuff class",
    "delta_rule": "pixel counts when max(pred/gt, gt/pred) <= tau",
}


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    """counts[g, p]: number of pixels with true class g predicted as p."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"confusion_matrix: extents differ {pred.shape} vs {gt.shape}")
    for name, a in (("pred", pred), ("gt", gt)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"confusion_matrix: {name} labels outside [0, {num_classes})")
    flat = gt.reshape(-1) * num_classes + pred.reshape(-1)
    return np.bincount(flat, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def _pct(q: Fraction) -> float:
    return float(100 * q)


def _merged_iou(cm: np.ndarray, mask: np.ndarray) -> float:
    inter = int(cm[np.ix_(mask, mask)].sum())
    union = int(cm[mask, :].sum() + cm[:, mask].sum()) - inter
    return _pct(Fraction(inter, union)) if union else math.nan


def semantic_metrics(cm: np.ndarray, registry: ClassRegistry) -> dict:
    """Semantic scores in percent from a confusion matrix (rows = ground truth).

    Every score is a ratio of pixel counts, so it is computed in exact rational
    arithmetic and rounded to float once.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("semantic_metrics: empty confusion matrix")
    diag = [int(v) for v in np.diag(cm)]
    rows = [int(v) for v in cm.sum(axis=1)]
    cols = [int(v) for v in cm.sum(axis=0)]
    present = [r > 0 for r in rows]
    iou = [Fraction(d, r + c - d) if r + c - d else Fraction(0) for d, r, c in zip(diag, rows, cols)]
    acc = [Fraction(d, r) if r else Fraction(0) for d, r in zip(diag, rows)]
    n_present = sum(present)
    return {
        "mIoU": _pct(sum(v for v, p in zip(iou, present) if p) / n_present),
        "IoU_T": _merged_iou(cm, registry.thing_mask),
        "IoU_S": _merged_iou(cm, registry.stuff_mask),
        "fwIoU": _pct(sum(Fraction(r, total) * v for r, v in zip(rows, iou))),
        "pACC": _pct(Fraction(sum(diag), total)),
        "mACC": _pct(sum(v for v, p in zip(acc, present) if p) / n_present),
        "per_class_IoU": [_pct(v) if p else None for v, p in zip(iou, present)],
    }


@dataclass
class DepthAccumulator:
    """Pooled sums so that depth metrics can be merged across views."""

    n: int = 0
    abs_err: float = 0.0
    rel_err: float = 0.0
    n_t: int = 0
    rel_t: float = 0.0
    n_s: int = 0
    rel_s: float = 0.0
    within: list = field(default_factory=lambda: [0, 0, 0])

    def add(self, pred, gt, gt_labels, registry: ClassRegistry) -> None:
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        gt_labels = np.asarray(gt_labels, dtype=np.int64)
        if not (pred.shape == gt.shape == gt_labels.shape):
            raise ValueError("depth_metrics: raster extents differ")
        valid = np.isfinite(gt) & (gt > 0)
        p, g, lab = pred[valid], gt[valid], gt_labels[valid]
        err = np.abs(p - g)
        rel = err / g
        self.n += int(valid.sum())
        self.abs_err += float(err.sum())
        self.rel_err += float(rel.sum())
        things = registry.thing_mask[lab]
        stuff = registry.stuff_mask[lab]
        self.n_t += int(things.sum())
        self.rel_t += float(rel[things].sum())
        self.n_s += int(stuff.sum())
        self.rel_s += float(rel[stuff].sum())
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.maximum(p / g, g / p)
        for i, tau in enumerate(DELTA_TAUS):
            self.within[i] += int((ratio <= tau).sum())

    def merge(self, other: "DepthAccumulator") -> None:
        self.n += other.n
        self.abs_err += other.abs_err
        self.rel_err += other.rel_err
        self.n_t += other.n_t
        self.rel_t += other.rel_t
        self.n_s += other.n_s
        self.rel_s += other.rel_s
        self.within = [a + b for a, b in zip(self.within, other.within)]

    def result(self) -> dict:
        def div(a, b):
            return a / b if b else math.nan

        return {
            "L1": div(self.abs_err, self.n),
            "Rel": div(self.rel_err, self.n),
            "Rel_T": div(self.rel_t, self.n_t),
            "Rel_S": div(self.rel_s, self.n_s),
            "delta_1.25": div(100.0 * self.within[0], self.n),
            "delta_1.25^2": div(100.0 * self.within[1], self.n),
            "delta_1.25^3": div(100.0 * self.within[2], self.n),
        }


def depth_metrics(pred, gt, gt_labels, registry: ClassRegistry) -> dict:
    acc = DepthAccumulator()
    acc.add(pred, gt, gt_labels, registry)
    return acc.result()


# ----------------------------------------------------------------------
# report formatting
# ----------------------------------------------------------------------


def _json_num(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


def report_json(metrics: dict, pixels: int, extra: dict | None = None) -> dict:
    out = {k: _json_num(metrics.get(k)) for k in METRIC_FIELDS}
    out["pixels"] = int(pixels)
    out["metadata"] = dict(REPORT_METADATA)
    if extra:
        out.update(extra)
    return out


def _cell(v, width: int) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-".rjust(width)
    return f"{v:.3f}".rjust(width) if abs(v) < 10 else f"{v:.1f}".rjust(width)


def format_table(rows: list[tuple[str, dict]], hide_semantic: set[str] = frozenset()) -> str:
    """Aligned text table; rows named in ``hide_semantic`` print dashes in the
    semantic columns."""
    name_w = max([len("method")] + [len(n) for n, _ in rows])
    width = 13
    head = "method".ljust(name_w) + "".join(c.rjust(width) for c in METRIC_FIELDS)
    lines = [head, "-" * len(head)]
    for name, m in rows:
        cells = []
        for c in METRIC_FIELDS:
            v = None if (name in hide_semantic and c in SEMANTIC_FIELDS) else m.get(c)
            cells.append(_cell(v, width))
        lines.append(name.ljust(name_w) + "".join(cells))
    return "\n".join(lines)


__all__ = [
    "BACKGROUND",
    "DepthAccumulator",
    "confusion_matrix",
    "depth_metrics",
    "format_table",
    "report_json",
    "semantic_metrics",
]
