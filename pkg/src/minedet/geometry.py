"""Axis-aligned box arithmetic: IoU, delta encoding, NMS, anchor matching.

Boxes use the ``(x_min, y_min, x_max, y_max)`` corner convention with
continuous pixel coordinates. Hot paths work on ``(N, 4)`` float arrays;
the ``Box`` dataclass is the validated currency for annotations and APIs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Smallest side length a box may have after clipping; sub-pixel boxes are
# rejected by the feature extractor.
MIN_BOX_SIZE = 1.0

# log-ratio clamp applied before exp() when decoding deltas
DELTA_CLAMP = 4.0

LABEL_POSITIVE = 1
LABEL_NEGATIVE = 0
LABEL_IGNORE = -1


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle with strictly positive area."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(np.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"box must have positive area, got {coords}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "Box":
        x0, y0, x1, y1 = (float(v) for v in arr)
        return Box(x0, y0, x1, y1)


@dataclass(frozen=True)
class LabeledBox:
    """Box with a category index (0 is reserved for background) and optional score."""

    box: Box
    category: int
    score: float | None = None

    def __post_init__(self):
        if self.category < 1:
            raise ValueError(f"labeled box category must be >= 1, got {self.category}")


@dataclass(frozen=True)
class BoxDelta:
    """Center offsets normalized by anchor size plus log width/height ratios."""

    t_x: float
    t_y: float
    t_w: float
    t_h: float

    def __post_init__(self):
        vals = (self.t_x, self.t_y, self.t_w, self.t_h)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"box delta components must be finite, got {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.t_x, self.t_y, self.t_w, self.t_h], dtype=np.float64)


def _as_box_array(b) -> np.ndarray:
    if isinstance(b, Box):
        return b.as_array()
    return np.asarray(b, dtype=np.float64)


def iou(a, b) -> float:
    """Intersection-over-union of two boxes; 0 when disjoint."""
    a = _as_box_array(a)
    b = _as_box_array(b)
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return float(inter / (area_a + area_b - inter))


def pairwise_iou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """IoU matrix of shape (len(a), len(b)) for two (N, 4) arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(boxes_a[:, None, 2], boxes_b[None, :, 2]) - np.maximum(
        boxes_a[:, None, 0], boxes_b[None, :, 0]
    )
    iy = np.minimum(boxes_a[:, None, 3], boxes_b[None, :, 3]) - np.maximum(
        boxes_a[:, None, 1], boxes_b[None, :, 1]
    )
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0.0, inter / union, 0.0)


def encode_array(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Encode boxes against anchors as (tx, ty, tw, th) rows."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0.0) or np.any(ah <= 0.0):
        raise ValueError("anchors must have positive width and height")
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    bcx = boxes[:, 0] + 0.5 * bw
    bcy = boxes[:, 1] + 0.5 * bh
    return np.stack(
        [(bcx - acx) / aw, (bcy - acy) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1
    )


def decode_array(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Invert ``encode_array``; log ratios are clamped before exponentiation."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0.0) or np.any(ah <= 0.0):
        raise ValueError("anchors must have positive width and height")
    acx = anchors[:, 0] + 0.5 * aw
    acy = anchors[:, 1] + 0.5 * ah
    cx = deltas[:, 0] * aw + acx
    cy = deltas[:, 1] * ah + acy
    w = np.exp(np.clip(deltas[:, 2], -DELTA_CLAMP, DELTA_CLAMP)) * aw
    h = np.exp(np.clip(deltas[:, 3], -DELTA_CLAMP, DELTA_CLAMP)) * ah
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode(box: Box, anchor: Box) -> BoxDelta:
    row = encode_array(box.as_array()[None], anchor.as_array()[None])[0]
    return BoxDelta(*(float(v) for v in row))


def decode(delta: BoxDelta, anchor: Box) -> Box:
    row = decode_array(delta.as_array()[None], anchor.as_array()[None])[0]
    return Box.from_array(row)


def clip_boxes(
    boxes: np.ndarray, width: float, height: float, min_size: float = MIN_BOX_SIZE
) -> np.ndarray:
    """Clip boxes to image bounds, preserving a minimum side length.

    Boxes that collapse under clipping are re-expanded to ``min_size`` around
    their clipped center and shifted back inside the image, so the output
    always satisfies the Box invariants.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, 0] = np.clip(boxes[:, 0], 0.0, width)
    boxes[:, 2] = np.clip(boxes[:, 2], 0.0, width)
    boxes[:, 1] = np.clip(boxes[:, 1], 0.0, height)
    boxes[:, 3] = np.clip(boxes[:, 3], 0.0, height)
    for lo, hi, limit in ((0, 2, width), (1, 3, height)):
        side = boxes[:, hi] - boxes[:, lo]
        narrow = side < min_size
        if np.any(narrow):
            c = 0.5 * (boxes[narrow, lo] + boxes[narrow, hi])
            c = np.clip(c, 0.5 * min_size, limit - 0.5 * min_size)
            boxes[narrow, lo] = c - 0.5 * min_size
            boxes[narrow, hi] = c + 0.5 * min_size
    return boxes


def clip_box(box: Box, width: float, height: float, min_size: float = MIN_BOX_SIZE) -> Box:
    return Box.from_array(clip_boxes(box.as_array()[None], width, height, min_size)[0])


def nms(
    boxes: np.ndarray,
    scores: np.ndarray,
    iou_threshold: float,
    max_keep: int | None = None,
) -> list[int]:
    """Greedy non-maximum suppression.

    Returns kept indices in score-descending order. Equal scores are broken
    by lower index, and a remaining box is discarded only when its IoU with
    the kept box strictly exceeds the threshold. ``max_keep`` truncates the
    greedy scan early; the result equals the untruncated result's prefix.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError("boxes and scores must have matching lengths")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    order = np.argsort(-scores, kind="stable")
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    keep: list[int] = []
    while order.size > 0:
        i = int(order[0])
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[1:]
        if rest.size == 0:
            break
        # inlined pairwise_iou row; NMS dominates the training hot path
        ix = np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0])
        iy = np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1])
        inter = np.maximum(ix, 0.0) * np.maximum(iy, 0.0)
        union = areas[i] + areas[rest] - inter
        overlaps = np.where(inter > 0.0, inter / union, 0.0)
        order = rest[overlaps <= iou_threshold]
    return keep


@dataclass
class AnchorAssignment:
    """Per-anchor training label and the matched groundtruth index.

    ``labels[i]`` is 1 (positive), 0 (negative) or -1 (ignore); ``gt_index[i]``
    identifies the matched groundtruth for positives and is -1 otherwise.
    """

    labels: np.ndarray
    gt_index: np.ndarray

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == LABEL_POSITIVE)

    @property
    def negative_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == LABEL_NEGATIVE)

    @property
    def contributing_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels != LABEL_IGNORE)


def match_anchors(
    anchors: np.ndarray,
    gt_boxes: np.ndarray,
    pos_threshold: float = 0.7,
    neg_threshold: float = 0.3,
) -> AnchorAssignment:
    """Assign anchors to groundtruth boxes by IoU.

    Anchors with best IoU >= ``pos_threshold`` are positive, those with best
    IoU < ``neg_threshold`` are negative, the band in between is ignored.
    The best anchor for each groundtruth is additionally forced positive so
    every groundtruth keeps at least one positive anchor.
    """
    if pos_threshold < neg_threshold:
        raise ValueError("pos_threshold must be >= neg_threshold")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    num = anchors.shape[0]
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_boxes.shape[0] == 0:
        return AnchorAssignment(
            labels=np.zeros(num, dtype=np.int8),
            gt_index=np.full(num, -1, dtype=np.int64),
        )
    overlaps = pairwise_iou(anchors, gt_boxes)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(num), best_gt]
    labels = np.full(num, LABEL_IGNORE, dtype=np.int8)
    labels[best_iou < neg_threshold] = LABEL_NEGATIVE
    labels[best_iou >= pos_threshold] = LABEL_POSITIVE
    gt_index = np.where(labels == LABEL_POSITIVE, best_gt, -1).astype(np.int64)
    # Coverage pass: give each groundtruth its own forced-positive anchor by
    # repeatedly taking the highest-IoU (anchor, gt) pair among unclaimed
    # anchors and uncovered gts. Ties break to the lower anchor index, then
    # the lower gt index (row-major argmax).
    avail = overlaps.copy()
    for _ in range(min(gt_boxes.shape[0], num)):
        a, g = np.unravel_index(int(avail.argmax()), avail.shape)
        labels[a] = LABEL_POSITIVE
        gt_index[a] = g
        avail[a, :] = -1.0
        avail[:, g] = -1.0
    return AnchorAssignment(labels=labels, gt_index=gt_index)
