"""Dice similarity and Hausdorff distance on integer label masks."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

_EIGHT = np.ones((3, 3), dtype=bool)


def dice_score(pred: np.ndarray, true: np.ndarray, num_classes: int) -> tuple[np.ndarray, float]:
    """Per-class DSC for classes ``1..K-1`` and their mean.

    A class absent from both masks scores 1.0.
    """
    pred, true = np.asarray(pred), np.asarray(true)
    scores = np.empty(num_classes - 1)
    for k in range(1, num_classes):
        p, g = pred == k, true == k
        denom = int(p.sum()) + int(g.sum())
        scores[k - 1] = 1.0 if denom == 0 else 2.0 * int((p & g).sum()) / denom
    return scores, float(scores.mean()) if scores.size else 1.0


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 8-neighbour outside the mask (image edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    inner = ndimage.binary_erosion(mask, structure=_EIGHT, border_value=0)
    return mask & ~inner


def surface_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from every boundary pixel of ``a`` to the nearest boundary pixel of ``b``."""
    ba, bb = boundary(a), boundary(b)
    dt = ndimage.distance_transform_edt(~bb)
    return dt[ba]


def hausdorff(
    pred: np.ndarray, true: np.ndarray, class_id: int, percentile: float = 95
) -> float:
    """Symmetric percentile Hausdorff distance in pixels for one class.

    Both directed distance sets are pooled before taking the percentile, so
    ``percentile=100`` is the classic Hausdorff distance.  Both masks empty
    gives 0; exactly one empty gives the image diagonal.
    """
    p = np.asarray(pred) == class_id
    g = np.asarray(true) == class_id
    if not p.any() and not g.any():
        return 0.0
    if not p.any() or not g.any():
        return diagonal(p.shape)
    d = np.concatenate([surface_distances(p, g), surface_distances(g, p)])
    return float(np.percentile(d, percentile))


def diagonal(shape) -> float:
    return math.hypot(*shape)


def case_metrics(pred: np.ndarray, true: np.ndarray, num_classes: int, percentile: float = 95) -> dict:
    dsc, _ = dice_score(pred, true, num_classes)
    hd = np.array([hausdorff(pred, true, k, percentile) for k in range(1, num_classes)])
    return {"dsc": dsc, "hd": hd}


def aggregate(cases: list[dict]) -> dict:
    """Mean over cases of per-case per-class values; summed in case order."""
    dsc = np.mean(np.stack([c["dsc"] for c in cases]), axis=0)
    hd = np.mean(np.stack([c["hd"] for c in cases]), axis=0)
    return {
        "dsc": [float(v) for v in dsc],
        "mean_dsc": float(dsc.mean()),
        "hd95": [float(v) for v in hd],
        "mean_hd95": float(hd.mean()),
    }
