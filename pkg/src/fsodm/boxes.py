"""Box geometry on (cx, cy, w, h) arrays."""

from __future__ import annotations

import numpy as np


def to_corners(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2, b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2], axis=1)


def iou(a, b) -> float:
    """IoU of two single boxes given as (cx, cy, w, h)."""
    return float(iou_matrix(np.asarray(a, dtype=np.float64)[None], np.asarray(b, dtype=np.float64)[None])[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, [len(a), len(b)]."""
    ca, cb = to_corners(a), to_corners(b)
    ix0 = np.maximum(ca[:, None, 0], cb[None, :, 0])
    iy0 = np.maximum(ca[:, None, 1], cb[None, :, 1])
    ix1 = np.minimum(ca[:, None, 2], cb[None, :, 2])
    iy1 = np.minimum(ca[:, None, 3], cb[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def nms_indices(boxes, scores, iou_threshold: float = 0.45) -> np.ndarray:
    """Greedy suppression for one category; returns kept indices by descending score.

    Equal scores keep the lower index first.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep = []
    alive = np.ones(len(order), dtype=bool)
    ious = iou_matrix(boxes[order], boxes[order]) if len(order) else np.zeros((0, 0))
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        alive &= ~(ious[i] > iou_threshold)
        alive[i] = False
    return np.asarray(keep, dtype=np.int64)
