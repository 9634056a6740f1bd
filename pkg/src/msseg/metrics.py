"""Segmentation quality metrics: accuracy, IoU, Dice, average surface distance.

All four operate on binary masks and are symmetric in (prediction, truth).
Boundaries are mask pixels with at least one 4-neighbor outside the mask (the
image border counts as outside); surface distances are Euclidean distances
between pixel centers.
"""

from __future__ import annotations

import numpy as np


def _as_bool_mask(x, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {x.shape}")
    if x.dtype != bool:
        vals = np.unique(x)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"{name} must be binary, found values {vals[:5]}")
        x = x.astype(bool)
    return x


def _check_pair(pred, gt):
    p = _as_bool_mask(pred, "pred")
    g = _as_bool_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def accuracy(pred, gt) -> float:
    p, g = _check_pair(pred, gt)
    return float(np.count_nonzero(p == g)) / p.size


def iou(pred, gt) -> float:
    p, g = _check_pair(pred, gt)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(p & g)) / union


def dsc(pred, gt) -> float:
    p, g = _check_pair(pred, gt)
    total = np.count_nonzero(p) + np.count_nonzero(g)
    if total == 0:
        return 1.0
    return 2.0 * np.count_nonzero(p & g) / total


def boundary_pixels(mask) -> np.ndarray:
    """(K, 2) row/col coordinates of 4-connected boundary pixels."""
    m = _as_bool_mask(mask, "mask")
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    inner = (padded[:-2, 1:-1] & padded[2:, 1:-1]
             & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~inner)


def _directed_min_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Min Euclidean distance from every point of a to the set b (chunked)."""
    mins = np.empty(len(a))
    chunk = max(1, 2_000_000 // max(len(b), 1))
    for start in range(0, len(a), chunk):
        part = a[start:start + chunk]
        d2 = ((part[:, None, :] - b[None, :, :]).astype(np.float64) ** 2).sum(axis=2)
        mins[start:start + chunk] = np.sqrt(d2.min(axis=1))
    return mins


def asd(pred, gt) -> float:
    """Symmetric average surface distance between two nonempty masks."""
    p, g = _check_pair(pred, gt)
    if not p.any() or not g.any():
        raise ValueError("undefined surface distance: empty mask")
    bp = boundary_pixels(p)
    bg = boundary_pixels(g)
    total = _directed_min_distances(bp, bg).sum() + _directed_min_distances(bg, bp).sum()
    return float(total / (len(bp) + len(bg)))


def argmax_labels(scores) -> np.ndarray:
    """(N, H, W) soft scores -> (H, W) labels; ties break to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 3:
        raise ValueError(f"scores must be 3-d, got shape {scores.shape}")
    return np.argmax(scores, axis=0)


def per_class_masks(labels, n_classes: int):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError(f"label map must be 2-d, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(
            f"label values span [{labels.min()}, {labels.max()}], outside 0..{n_classes - 1}"
        )
    return [(labels == n) for n in range(n_classes)]


def macro_average(metric, pred_labels, gt_labels, n_classes: int) -> float:
    """One-vs-rest per-class metric, arithmetic mean over classes.

    Conventions for degenerate classes: IoU/DSC score 1 when both masks are
    empty (handled inside those metrics); ASD skips classes where either
    boundary is missing, since the distance is undefined there.
    """
    preds = per_class_masks(pred_labels, n_classes)
    gts = per_class_masks(gt_labels, n_classes)
    values = []
    for pm, gm in zip(preds, gts):
        if metric is asd and (not pm.any() or not gm.any()):
            if not pm.any() and not gm.any():
                continue
            continue
        values.append(metric(pm, gm))
    if not values:
        raise ValueError("no class had a defined metric value")
    return float(np.mean(values))


def evaluate_all(pred_labels, gt_labels, n_classes: int) -> dict:
    """Per-class and macro values of all four metrics.

    Per-class ASD is NaN where either boundary is empty; the macro ASD
    averages only the defined classes.
    """
    preds = per_class_masks(pred_labels, n_classes)
    gts = per_class_masks(gt_labels, n_classes)
    per_class = []
    for pm, gm in zip(preds, gts):
        row = {
            "acc": accuracy(pm, gm),
            "iou": iou(pm, gm),
            "dsc": dsc(pm, gm),
            "asd": asd(pm, gm) if (pm.any() and gm.any()) else float("nan"),
        }
        per_class.append(row)
    defined_asd = [r["asd"] for r in per_class if not np.isnan(r["asd"])]
    macro = {
        "acc": float(np.mean([r["acc"] for r in per_class])),
        "miou": float(np.mean([r["iou"] for r in per_class])),
        "dsc": float(np.mean([r["dsc"] for r in per_class])),
        "asd": float(np.mean(defined_asd)) if defined_asd else float("nan"),
    }
    return {"per_class": per_class, "macro": macro}
