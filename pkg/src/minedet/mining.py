"""Box mining from image-level labels.

A box is mined for (image, category) when the detector predicts that
category for it (which must appear in the image's label set), it is the
highest-scoring such prediction in the image, and its score strictly exceeds
the confidence threshold. The mined set is recomputed from scratch from the
whole weakly labeled pool on every call; growth across iterations comes from
better detectors, not accumulation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .geometry import Box
from .metrics import mined_box_quality
from .model import (
    AnchorStatsCache,
    DetectionSet,
    DetectorParams,
    ModelConfig,
    VariantFlags,
    detect,
)
from .scenegen import Dataset, MinedBox

_MINED_FORMAT = "minedet-mined-v1"


@dataclass(frozen=True)
class MiningConfig:
    """Mining threshold; a detection qualifies only with score > theta_b."""

    theta_b: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.theta_b <= 1.0:
            raise ValueError(f"theta_b must be in [0, 1], got {self.theta_b}")


def mine_from_detections(
    image_labels: set[int],
    detections: DetectionSet,
    theta_b: float,
    iteration: int,
) -> list[MinedBox]:
    """Apply the three mining conditions to one image's detections."""
    out: list[MinedBox] = []
    for category in sorted(image_labels):
        candidates = [
            i for i in range(len(detections)) if detections.categories[i] == category
        ]
        if not candidates:
            continue
        best = max(candidates, key=lambda i: (detections.scores[i], -i))
        score = float(detections.scores[best])
        if score > theta_b:
            out.append(
                MinedBox(Box.from_array(detections.boxes[best]), category, score, iteration)
            )
    return out


def mine_boxes(
    dataset: Dataset,
    image_labels: dict[str, set[int]],
    params: DetectorParams,
    flags: VariantFlags,
    config: ModelConfig,
    mining: MiningConfig,
    iteration: int,
    cache: AnchorStatsCache | None = None,
) -> dict[str, list[MinedBox]]:
    """Mine the whole weakly labeled pool with the current detector."""
    by_id = {s.image_id: s for s in dataset.scenes}
    out: dict[str, list[MinedBox]] = {}
    for image_id in sorted(image_labels):
        detections = detect(by_id[image_id], params, flags, config, cache=cache)
        mined = mine_from_detections(
            image_labels[image_id], detections, mining.theta_b, iteration
        )
        if mined:
            out[image_id] = mined
    return out


@dataclass(frozen=True)
class CurvePoint:
    theta: float
    count: int
    precision: float


def precision_vs_count_curve(
    dataset: Dataset,
    image_labels: dict[str, set[int]],
    withheld_gt: dict,
    params: DetectorParams,
    flags: VariantFlags,
    config: ModelConfig,
    thetas,
    iteration: int = 1,
    cache: AnchorStatsCache | None = None,
) -> list[CurvePoint]:
    """Mined count and precision as the threshold sweeps, theta descending.

    Detections are computed once per image; each theta re-filters them, so
    the points are exactly what ``mine_boxes`` would produce at that theta.
    """
    by_id = {s.image_id: s for s in dataset.scenes}
    detections = {
        image_id: detect(by_id[image_id], params, flags, config, cache=cache)
        for image_id in sorted(image_labels)
    }
    points = []
    for theta in sorted(thetas, reverse=True):
        mined = {}
        for image_id in sorted(image_labels):
            boxes = mine_from_detections(
                image_labels[image_id], detections[image_id], theta, iteration
            )
            if boxes:
                mined[image_id] = boxes
        quality = mined_box_quality(mined, withheld_gt)
        points.append(
            CurvePoint(theta=float(theta), count=quality.mined_count, precision=quality.precision)
        )
    return points


def dump_mined(mined: dict[str, list[MinedBox]], path) -> None:
    """One JSON line per mined box, ascending image id then category."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"format": _MINED_FORMAT}, separators=(",", ":")) + "\n")
        for image_id in sorted(mined):
            for mb in mined[image_id]:
                rec = {
                    "image_id": image_id,
                    "category": mb.category,
                    "score": mb.score,
                    "box": list(mb.box.as_array()),
                    "iteration": mb.iteration,
                }
                fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_mined(path) -> dict[str, list[MinedBox]]:
    out: dict[str, list[MinedBox]] = {}
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != _MINED_FORMAT:
            raise ValueError(f"unrecognized mined-annotation header in {path}")
        for line in fh:
            rec = json.loads(line)
            out.setdefault(rec["image_id"], []).append(
                MinedBox(
                    Box.from_array(rec["box"]),
                    rec["category"],
                    rec["score"],
                    rec["iteration"],
                )
            )
    return out
