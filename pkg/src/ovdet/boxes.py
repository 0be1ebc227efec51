"""Box geometry: IoU, NMS, anchor grids and the log-space box parameterization.

Boxes are (x1, y1, x2, y2) arrays in image coordinates with x1 < x2, y1 < y2.
"""

from __future__ import annotations

import numpy as np


def box_area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.atleast_2d(boxes)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def iou(a, b) -> float:
    """Intersection over union of two boxes."""
    return float(iou_matrix(np.atleast_2d(np.asarray(a, dtype=np.float64)),
                            np.atleast_2d(np.asarray(b, dtype=np.float64)))[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) box arrays."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def nms(boxes: np.ndarray, scores: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending-score order.

    Suppresses any box with IoU strictly greater than the threshold against
    an already kept box. Ties break by score, then box coordinates
    lexicographically, so the result does not depend on input order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = sorted(range(len(scores)),
                   key=lambda i: (-scores[i], boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]))
    order = np.asarray(order, dtype=np.int64)
    keep = []
    alive = np.ones(len(order), dtype=bool)
    ious = iou_matrix(boxes[order], boxes[order])
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        keep.append(order[pos])
        alive[pos + 1 :] &= ious[pos, pos + 1 :] <= threshold
    return np.asarray(keep, dtype=np.int64)


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, height)
    return out


def generate_anchors(image_size: int, stride: int, scales, ratios) -> np.ndarray:
    """Anchor boxes centered on every feature-grid cell; pure function of its inputs."""
    g = image_size // stride
    shifts = (np.arange(g) + 0.5) * stride
    cx, cy = np.meshgrid(shifts, shifts)  # (g, g)
    anchors = []
    for scale in scales:
        for ratio in ratios:
            w = scale * np.sqrt(1.0 / ratio)
            h = scale * np.sqrt(ratio)
            anchors.append(np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1))
    # (g, g, A, 4) -> (g*g*A, 4) with anchor index fastest, matching a (A,
    # H, W) head laid out channel-first and flattened as H, W, A after permute
    stacked = np.stack(anchors, axis=2)
    return stacked.reshape(-1, 4).astype(np.float64)


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Regression targets (tx, ty, tw, th) for matched anchor/gt pairs."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    gcx = gts[:, 0] + gw / 2
    gcy = gts[:, 1] + gh / 2
    return np.stack([(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of encode_boxes; deltas clamped so exp() cannot overflow."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = anchors[:, 0] + aw / 2
    acy = anchors[:, 1] + ah / 2
    d = np.clip(deltas.astype(np.float64), -8.0, 8.0)
    cx = d[:, 0] * aw + acx
    cy = d[:, 1] * ah + acy
    w = np.exp(d[:, 2]) * aw
    h = np.exp(d[:, 3]) * ah
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
