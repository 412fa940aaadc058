"""Segmentation metrics against exact ground truth.

Conventions: a class absent from both prediction and ground truth has IoU 1
(and is left out of the mean); two empty boundary sets give boundary F1 = 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frames import write_pgm8

N_CLASSES = 3


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"dimension mismatch: pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def confusion(pred, gt, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with ground truth on rows and prediction on columns."""
    pred, gt = _check_pair(pred, gt)
    idx = gt.astype(np.int64).ravel() * n_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def iou(conf: np.ndarray) -> tuple[np.ndarray, float]:
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    union = tp + fp + fn
    per_class = np.where(union > 0, tp / np.where(union > 0, union, 1.0), 1.0)
    present = conf.sum(axis=1) > 0
    mean = float(per_class[present].mean()) if present.any() else 1.0
    return per_class, mean


def boundary_mask(classes: np.ndarray) -> np.ndarray:
    """Pixels with at least one 4-neighbour of a different class."""
    c = np.asarray(classes)
    b = np.zeros(c.shape, dtype=bool)
    diff_v = c[1:, :] != c[:-1, :]
    diff_h = c[:, 1:] != c[:, :-1]
    b[1:, :] |= diff_v
    b[:-1, :] |= diff_v
    b[:, 1:] |= diff_h
    b[:, :-1] |= diff_h
    return b


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    h, w = mask.shape
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            src = mask[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
            out[max(0, dy) : h - max(0, -dy), max(0, dx) : w - max(0, -dx)] |= src
    return out


def boundary_f1(pred, gt, tolerance: int = 1) -> float:
    pred, gt = _check_pair(pred, gt)
    bp, bg = boundary_mask(pred), boundary_mask(gt)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    precision = (bp & _dilate(bg, tolerance)).sum() / n_p
    recall = (bg & _dilate(bp, tolerance)).sum() / n_g
    if precision + recall == 0:
        return 0.0
    return float(2.0 * precision * recall / (precision + recall))


@dataclass
class DistanceBin:
    lo: float
    hi: float
    error_rate: float
    count: int


def distance_binned_error(pred, gt, gt_depth, bins: int = 4) -> list[DistanceBin]:
    """Error rate within equal-width depth intervals over the foreground pixels.

    An image without foreground yields an empty list. Empty bins report an
    error rate of 0 with count 0.
    """
    pred, gt = _check_pair(pred, gt)
    depth = np.asarray(gt_depth, dtype=np.float64)
    if depth.shape != gt.shape:
        raise ValueError("depth plane does not match the label plane")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    fg = np.isfinite(depth)
    if not fg.any():
        return []
    d = depth[fg]
    wrong = (pred[fg] != gt[fg])
    lo, hi = float(d.min()), float(d.max())
    if hi > lo:
        idx = np.minimum(((d - lo) / (hi - lo) * bins).astype(np.int64), bins - 1)
    else:
        idx = np.zeros(d.size, dtype=np.int64)
    counts = np.bincount(idx, minlength=bins)
    errors = np.bincount(idx, weights=wrong.astype(np.float64), minlength=bins)
    edges = np.linspace(lo, hi, bins + 1)
    return [
        DistanceBin(float(edges[i]), float(edges[i + 1]),
                    float(errors[i] / counts[i]) if counts[i] else 0.0, int(counts[i]))
        for i in range(bins)
    ]


def diff_map(pred, gt) -> np.ndarray:
    pred, gt = _check_pair(pred, gt)
    out = np.where(pred == gt, 0, 64 + 64 * gt.astype(np.int64))
    return out.astype(np.uint8)


def save_diff_map(path, pred, gt) -> None:
    write_pgm8(path, diff_map(pred, gt))


@dataclass
class SegMetrics:
    confusion: np.ndarray
    per_class_iou: np.ndarray
    mean_iou: float
    pixel_accuracy: float
    boundary_f1: float
    distance_bins: list = field(default_factory=list)

    def to_kv(self, prefix: str = "") -> dict:
        kv = {
            f"{prefix}mean_iou": self.mean_iou,
            f"{prefix}pixel_accuracy": self.pixel_accuracy,
            f"{prefix}boundary_f1": self.boundary_f1,
        }
        for i, v in enumerate(self.per_class_iou):
            kv[f"{prefix}iou_class{i}"] = float(v)
        for i, row in enumerate(self.confusion):
            kv[f"{prefix}confusion_row{i}"] = " ".join(str(int(x)) for x in row)
        for i, b in enumerate(self.distance_bins):
            kv[f"{prefix}bin{i}_range_m"] = f"{b.lo:.6f} {b.hi:.6f}"
            kv[f"{prefix}bin{i}_error"] = b.error_rate
            kv[f"{prefix}bin{i}_count"] = b.count
        return kv

    def to_text(self) -> str:
        lines = [
            f"mean IoU        {self.mean_iou:.4f}",
            "per-class IoU   " + "  ".join(f"{v:.4f}" for v in self.per_class_iou),
            f"pixel accuracy  {self.pixel_accuracy:.4f}",
            f"boundary F1     {self.boundary_f1:.4f}",
            "confusion (rows = ground truth):",
        ]
        lines += ["  " + " ".join(f"{int(x):8d}" for x in row) for row in self.confusion]
        if self.distance_bins:
            lines.append("error by depth:")
            lines += [f"  {b.lo:7.3f}-{b.hi:7.3f} m  error {b.error_rate:.4f}  (n={b.count})"
                      for b in self.distance_bins]
        else:
            lines.append("error by depth: no foreground pixels")
        return "\n".join(lines)


def evaluate(preds, gts, depths, bins: int = 4, n_classes: int = N_CLASSES) -> SegMetrics:
    """Pool metrics over one or more frames (lists of class images and depth planes)."""
    preds = [np.asarray(p) for p in preds]
    gts = [np.asarray(g) for g in gts]
    conf = sum(confusion(p, g, n_classes) for p, g in zip(preds, gts))
    per_class, mean = iou(conf)
    total = conf.sum()
    accuracy = float(np.trace(conf) / total) if total else 1.0
    bf1 = float(np.mean([boundary_f1(p, g) for p, g in zip(preds, gts)]))
    flat_p = np.concatenate([p.ravel() for p in preds])
    flat_g = np.concatenate([g.ravel() for g in gts])
    flat_d = np.concatenate([np.asarray(d, dtype=np.float64).ravel() for d in depths])
    dbins = distance_binned_error(flat_p, flat_g, flat_d, bins)
    return SegMetrics(conf, per_class, mean, accuracy, bf1, dbins)


def write_kv(path, kv: dict) -> None:
    with open(path, "w") as fh:
        for k, v in kv.items():
            fh.write(f"{k}={float(v)!r}\n" if isinstance(v, float) else f"{k}={v}\n")


def read_kv(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                out[k] = v
    return out
