"""Detection and mined-annotation quality metrics.

Average precision follows the 101-point interpolated convention with greedy
score-descending matching per image. Mined-box precision/recall counts a true
positive when a mined box overlaps an unmatched same-category groundtruth box
at IoU >= 0.5 (threshold configurable).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import iou

MINING_TP_IOU = 0.5

# 0.50, 0.55, ..., 0.95; rounding keeps each value equal to its literal
SWEEP_THRESHOLDS = tuple(round(0.5 + 0.05 * k, 2) for k in range(10))


@dataclass(frozen=True)
class MiningQuality:
    """Counts and ratios describing one mined-annotation set."""

    true_positive_count: int
    mined_count: int
    gt_count: int

    def __post_init__(self):
        if self.true_positive_count > min(self.mined_count, max(self.gt_count, 0)):
            raise ValueError("true positives cannot exceed mined or gt counts")

    @property
    def precision(self) -> float:
        return self.true_positive_count / self.mined_count if self.mined_count else 0.0

    @property
    def recall(self) -> float:
        return self.true_positive_count / self.gt_count if self.gt_count else 0.0


def table_entry(quality: MiningQuality) -> str:
    """Render (count, precision) the way the results tables print them."""
    return f"{quality.mined_count}, {quality.precision * 100:.1f}"


def _match_flags(detections, groundtruths, iou_threshold):
    """Greedy matching; returns per-detection TP flags in score order.

    ``detections``: (image_id, score, box) triples; ``groundtruths``:
    (image_id, box) pairs. Ties on score keep input order; a detection takes
    the unmatched gt with the highest IoU, equal IoU resolved to the lower
    gt index.
    """
    gts_by_image: dict = {}
    for image_id, box in groundtruths:
        gts_by_image.setdefault(image_id, []).append(np.asarray(box, dtype=np.float64))
    matched = {img: [False] * len(boxes) for img, boxes in gts_by_image.items()}
    order = sorted(range(len(detections)), key=lambda i: (-detections[i][1], i))
    flags = []
    for i in order:
        image_id, _, box = detections[i]
        best_iou, best_j = 0.0, -1
        for j, gt_box in enumerate(gts_by_image.get(image_id, [])):
            if matched[image_id][j]:
                continue
            v = iou(box, gt_box)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[image_id][best_j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(detections, groundtruths, iou_threshold: float) -> float:
    """101-point interpolated AP for one category.

    Zero groundtruths: 1.0 with no detections (nothing to find, nothing
    claimed), 0.0 otherwise.
    """
    detections = list(detections)
    groundtruths = list(groundtruths)
    if not groundtruths:
        return 1.0 if not detections else 0.0
    if not detections:
        return 0.0
    flags = np.array(_match_flags(detections, groundtruths, iou_threshold))
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / len(groundtruths)
    precision = tp / (tp + fp)
    # k/100 exactly; linspace would drift off the recall values by one ulp
    levels = np.arange(101) / 100.0
    interp = np.zeros(101)
    for k, level in enumerate(levels):
        at_least = precision[recall >= level]
        interp[k] = at_least.max() if len(at_least) else 0.0
    return float(interp.mean())


def map_sweep(
    detections_by_category: dict,
    gts_by_category: dict,
    thresholds=SWEEP_THRESHOLDS,
) -> tuple[float, float]:
    """(mAP averaged over the IoU sweep, mAP at 0.5).

    Categories without groundtruth in the split are left out of both means.
    """
    categories = sorted(c for c, gts in gts_by_category.items() if gts)
    if not categories:
        return 0.0, 0.0
    sweep_means = []
    at_half = []
    for c in categories:
        dets = detections_by_category.get(c, [])
        gts = gts_by_category[c]
        aps = [average_precision(dets, gts, t) for t in thresholds]
        sweep_means.append(float(np.mean(aps)))
        at_half.append(average_precision(dets, gts, 0.5))
    return float(np.mean(sweep_means)), float(np.mean(at_half))


def mined_box_quality(
    mined: dict, withheld_gt: dict, iou_threshold: float = MINING_TP_IOU
) -> MiningQuality:
    """Score mined annotations against the withheld groundtruth.

    ``mined``: image_id -> mined boxes (category + score); ``withheld_gt``:
    image_id -> labeled groundtruth boxes for the whole weakly labeled pool.
    Recall is over every groundtruth box in that pool.
    """
    gt_count = sum(len(v) for v in withheld_gt.values())
    mined_count = sum(len(v) for v in mined.values())
    tp = 0
    for image_id in sorted(mined):
        per_cat_gts: dict[int, list] = {}
        for lb in withheld_gt.get(image_id, []):
            per_cat_gts.setdefault(lb.category, []).append(lb.box.as_array())
        boxes = sorted(
            range(len(mined[image_id])),
            key=lambda i: (-mined[image_id][i].score, i),
        )
        matched = {c: [False] * len(v) for c, v in per_cat_gts.items()}
        for i in boxes:
            mb = mined[image_id][i]
            best_iou, best_j = 0.0, -1
            for j, gt_box in enumerate(per_cat_gts.get(mb.category, [])):
                if matched.get(mb.category, [])[j]:
                    continue
                v = iou(mb.box.as_array(), gt_box)
                if v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0 and best_iou >= iou_threshold:
                matched[mb.category][best_j] = True
                tp += 1
    return MiningQuality(true_positive_count=tp, mined_count=mined_count, gt_count=gt_count)
