"""Miniature two-stage detector over pooled box statistics.

The backbone stand-in pools a box region into a 4x4 grid of mean intensities
(2x2 bilinear samples per cell), appends normalized width/height, and feeds a
one-hidden-layer tanh perceptron. On top of the shared feature sit small
linear heads:

  rpn-cls / rpn-cls-a   scalar objectness logits (ensemble pair)
  rpn-reg               4 box deltas per anchor
  det-cls / det-cls-a   (C_target + 1)-way logits (ensemble pair)
  det-cls-s             (C_source + 1)-way logits, training-only target head
  det-reg               4 deltas per target category (class-specific)

At inference the ensemble pairs average their probabilities when the variant
flag enables the extra head; det-cls-s is never read.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import MIN_BOX_SIZE, clip_boxes, decode_array, nms
from .scenegen import Scene

PARAMS_VERSION = 1
_CHECKPOINT_FORMAT = "minedet-checkpoint-v1"

# deterministic tensor iteration order for init, SGD, and serialization
PARAM_TENSORS = (
    "extractor_w",
    "extractor_b",
    "rpn_cls_w",
    "rpn_cls_b",
    "rpn_cls_aux_w",
    "rpn_cls_aux_b",
    "rpn_reg_w",
    "rpn_reg_b",
    "det_cls_w",
    "det_cls_b",
    "det_cls_aux_w",
    "det_cls_aux_b",
    "det_cls_src_w",
    "det_cls_src_b",
    "det_reg_w",
    "det_reg_b",
)


@dataclass(frozen=True)
class ModelConfig:
    """Shapes and inference knobs for the miniature detector."""

    image_size: int = 32
    pool_grid: int = 4
    hidden_units: int = 32
    anchor_grid: int = 8
    anchor_scales: tuple[float, ...] = (6.0, 10.0, 16.0)
    num_proposals: int = 16
    rpn_nms_iou: float = 0.7
    det_nms_iou: float = 0.5
    rpn_pos_iou: float = 0.5
    rpn_neg_iou: float = 0.3
    det_pos_iou: float = 0.5
    init_scale: float = 0.1

    def __post_init__(self):
        if self.pool_grid < 1 or self.hidden_units < 1 or self.anchor_grid < 1:
            raise ValueError("pool_grid, hidden_units, anchor_grid must be >= 1")
        if not self.anchor_scales:
            raise ValueError("need at least one anchor scale")
        if self.num_proposals < 1:
            raise ValueError("num_proposals must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.pool_grid * self.pool_grid + 2


@dataclass(frozen=True)
class VariantFlags:
    """Which noise-tolerance mechanisms are active."""

    det_extra_head: bool = False
    det_zero_background: bool = False
    rpn_extra_head: bool = False
    distill: bool = False

    def __post_init__(self):
        if self.det_zero_background and not self.det_extra_head:
            raise ValueError("det_zero_background requires det_extra_head")


def tensor_shapes(
    config: ModelConfig, num_categories: int, source_category_count: int
) -> dict[str, tuple[int, ...]]:
    d, h = config.input_dim, config.hidden_units
    c, s = num_categories, source_category_count
    return {
        "extractor_w": (d, h),
        "extractor_b": (h,),
        "rpn_cls_w": (h, 1),
        "rpn_cls_b": (1,),
        "rpn_cls_aux_w": (h, 1),
        "rpn_cls_aux_b": (1,),
        "rpn_reg_w": (h, 4),
        "rpn_reg_b": (4,),
        "det_cls_w": (h, c + 1),
        "det_cls_b": (c + 1,),
        "det_cls_aux_w": (h, c + 1),
        "det_cls_aux_b": (c + 1,),
        "det_cls_src_w": (h, s + 1),
        "det_cls_src_b": (s + 1,),
        "det_reg_w": (h, 4 * c),
        "det_reg_b": (4 * c,),
    }


@dataclass
class DetectorParams:
    """All learnable tensors plus the category bookkeeping they were built for.

    ``category_ids`` are the global category indices this detector predicts;
    classification heads order their logits (background, *category_ids).
    """

    category_ids: tuple[int, ...]
    source_category_count: int
    tensors: dict[str, np.ndarray]
    version: int = PARAMS_VERSION

    def __post_init__(self):
        self.category_ids = tuple(int(c) for c in self.category_ids)
        missing = [n for n in PARAM_TENSORS if n not in self.tensors]
        if missing:
            raise ValueError(f"missing tensors: {missing}")
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t)):
                raise ValueError(f"tensor {name} contains non-finite values")

    @property
    def num_categories(self) -> int:
        return len(self.category_ids)

    def copy(self) -> "DetectorParams":
        return DetectorParams(
            category_ids=self.category_ids,
            source_category_count=self.source_category_count,
            tensors={n: t.copy() for n, t in self.tensors.items()},
            version=self.version,
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {n: np.zeros_like(t) for n, t in self.tensors.items()}

    def local_index(self, category: int) -> int:
        """Global category id -> logit column (background is column 0)."""
        return self.category_ids.index(category) + 1


def init_params(
    config: ModelConfig,
    category_ids,
    source_category_count: int,
    rng,
) -> DetectorParams:
    """Fresh parameters: small Gaussian weights, zero biases."""
    category_ids = tuple(int(c) for c in category_ids)
    shapes = tensor_shapes(config, len(category_ids), source_category_count)
    tensors = {}
    for name in PARAM_TENSORS:
        shape = shapes[name]
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape, dtype=np.float64)
        else:
            tensors[name] = rng.normal(0.0, config.init_scale, size=shape)
    return DetectorParams(
        category_ids=category_ids,
        source_category_count=source_category_count,
        tensors=tensors,
    )


def init_from_source(
    source: DetectorParams,
    target_category_ids,
    config: ModelConfig,
    rng,
) -> DetectorParams:
    """Warm-start a target detector from a trained source detector.

    Extractor and RPN tensors are copied bitwise; det-cls, det-cls-a, and
    det-reg are freshly sized for the target categories; det-cls-s starts as
    a copy of the source classifier so its distillation targets begin close.
    """
    target_category_ids = tuple(int(c) for c in target_category_ids)
    fresh = init_params(
        config, target_category_ids, source.num_categories, rng
    )
    for name in (
        "extractor_w",
        "extractor_b",
        "rpn_cls_w",
        "rpn_cls_b",
        "rpn_cls_aux_w",
        "rpn_cls_aux_b",
        "rpn_reg_w",
        "rpn_reg_b",
    ):
        fresh.tensors[name] = source.tensors[name].copy()
    fresh.tensors["det_cls_src_w"] = source.tensors["det_cls_w"].copy()
    fresh.tensors["det_cls_src_b"] = source.tensors["det_cls_b"].copy()
    return fresh


# ---------------------------------------------------------------------------
# pooled statistics and the shared extractor


def _bilinear(pixels: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample continuous coordinates; pixel (r, c) is centered at (c+.5, r+.5)."""
    h, w = pixels.shape
    ix = np.clip(xs - 0.5, 0.0, w - 1.0)
    iy = np.clip(ys - 0.5, 0.0, h - 1.0)
    x0 = np.floor(ix).astype(np.int64)
    y0 = np.floor(iy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = ix - x0
    fy = iy - y0
    return (
        pixels[y0, x0] * (1 - fx) * (1 - fy)
        + pixels[y0, x1] * fx * (1 - fy)
        + pixels[y1, x0] * (1 - fx) * fy
        + pixels[y1, x1] * fx * fy
    )


def stats_matrix(pixels: np.ndarray, boxes, grid: int) -> np.ndarray:
    """Pooled statistics rows: grid`x`grid cell means plus normalized w, h.

    Each cell is the mean of 2x2 bilinear samples at the cell's quarter
    points. Rows are row-major over cells (y outer, x inner).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    if n == 0:
        return np.zeros((0, grid * grid + 2), dtype=np.float64)
    h, w = pixels.shape
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    if np.any(bw < MIN_BOX_SIZE - 1e-9) or np.any(bh < MIN_BOX_SIZE - 1e-9):
        raise ValueError("boxes must be at least one pixel on each side")
    offs = (np.repeat(np.arange(grid), 2) + np.tile([0.25, 0.75], grid)) / grid
    xs = boxes[:, 0:1] + offs[None, :] * bw[:, None]  # (n, 2*grid)
    ys = boxes[:, 1:2] + offs[None, :] * bh[:, None]
    vals = _bilinear(pixels, xs[:, None, :], ys[:, :, None])  # (n, 2g, 2g) y-major
    cells = vals.reshape(n, grid, 2, grid, 2).mean(axis=(2, 4))
    return np.concatenate(
        [cells.reshape(n, -1), (bw / w)[:, None], (bh / h)[:, None]], axis=1
    )


def features_from_stats(stats: np.ndarray, params: DetectorParams) -> np.ndarray:
    """Shared extractor: tanh(stats @ W + b), one feature row per stats row."""
    return np.tanh(stats @ params.tensors["extractor_w"] + params.tensors["extractor_b"])


def extract_feature(scene: Scene, box, params: DetectorParams, grid: int = 4) -> np.ndarray:
    arr = np.asarray(box, dtype=np.float64) if not hasattr(box, "as_array") else box.as_array()
    stats = stats_matrix(scene.pixels, arr[None], grid)
    return features_from_stats(stats, params)[0]


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# anchors and inference


def build_anchors(config: ModelConfig) -> np.ndarray:
    """Grid of square anchors, one per (cell, scale), clipped to the image."""
    step = config.image_size / config.anchor_grid
    centers = (np.arange(config.anchor_grid) + 0.5) * step
    rows = []
    for cy in centers:
        for cx in centers:
            for s in config.anchor_scales:
                rows.append([cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2])
    return clip_boxes(np.array(rows), config.image_size, config.image_size)


class AnchorStatsCache:
    """Memoizes per-image pooled statistics for a fixed anchor set."""

    def __init__(self, anchors: np.ndarray, grid: int):
        self.anchors = anchors
        self.grid = grid
        self._stats: dict[str, np.ndarray] = {}

    def stats(self, scene: Scene) -> np.ndarray:
        cached = self._stats.get(scene.image_id)
        if cached is None:
            cached = stats_matrix(scene.pixels, self.anchors, self.grid)
            self._stats[scene.image_id] = cached
        return cached


@dataclass(frozen=True)
class ProposalSet:
    """Class-agnostic boxes with objectness scores, score-descending."""

    boxes: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        if np.any(self.scores < 0) or np.any(self.scores > 1):
            raise ValueError("proposal scores must lie in [0, 1]")

    def __len__(self) -> int:
        return self.boxes.shape[0]


@dataclass(frozen=True)
class DetectionSet:
    """Final boxes with global category ids, scores, and class distributions."""

    boxes: np.ndarray
    categories: np.ndarray
    scores: np.ndarray
    distributions: np.ndarray

    def __post_init__(self):
        if len(self.distributions):
            sums = self.distributions.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-6):
                raise ValueError("detection distributions must sum to 1")

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @staticmethod
    def empty(num_classes: int) -> "DetectionSet":
        return DetectionSet(
            boxes=np.zeros((0, 4)),
            categories=np.zeros(0, dtype=np.int64),
            scores=np.zeros(0),
            distributions=np.zeros((0, num_classes)),
        )


def rpn_objectness(
    features: np.ndarray, params: DetectorParams, flags: VariantFlags
) -> np.ndarray:
    """Per-row objectness; ensemble-averaged with rpn-cls-a when enabled."""
    p = sigmoid(features @ params.tensors["rpn_cls_w"] + params.tensors["rpn_cls_b"])[:, 0]
    if flags.rpn_extra_head:
        pa = sigmoid(
            features @ params.tensors["rpn_cls_aux_w"] + params.tensors["rpn_cls_aux_b"]
        )[:, 0]
        p = 0.5 * (p + pa)
    return p


def det_class_distribution(
    features: np.ndarray, params: DetectorParams, flags: VariantFlags
) -> np.ndarray:
    """Per-row class distribution; ensemble-averaged with det-cls-a when enabled."""
    p = softmax_rows(features @ params.tensors["det_cls_w"] + params.tensors["det_cls_b"])
    if flags.det_extra_head:
        pa = softmax_rows(
            features @ params.tensors["det_cls_aux_w"] + params.tensors["det_cls_aux_b"]
        )
        p = 0.5 * (p + pa)
    return p


def rpn_forward(
    scene: Scene,
    anchors: np.ndarray,
    params: DetectorParams,
    flags: VariantFlags,
    config: ModelConfig,
    anchor_stats: np.ndarray | None = None,
) -> ProposalSet:
    """Score anchors, decode deltas, suppress, keep the top proposals."""
    stats = anchor_stats
    if stats is None:
        stats = stats_matrix(scene.pixels, anchors, config.pool_grid)
    features = features_from_stats(stats, params)
    scores = rpn_objectness(features, params, flags)
    deltas = features @ params.tensors["rpn_reg_w"] + params.tensors["rpn_reg_b"]
    boxes = clip_boxes(decode_array(deltas, anchors), config.image_size, config.image_size)
    keep = nms(boxes, scores, config.rpn_nms_iou, max_keep=config.num_proposals)
    return ProposalSet(boxes=boxes[keep], scores=scores[keep])


def box_predictor_forward(
    scene: Scene,
    proposals: ProposalSet,
    params: DetectorParams,
    flags: VariantFlags,
    config: ModelConfig,
) -> DetectionSet:
    """Classify and refine proposals; det-cls-s never contributes here."""
    n = len(proposals)
    if n == 0:
        return DetectionSet.empty(params.num_categories + 1)
    stats = stats_matrix(scene.pixels, proposals.boxes, config.pool_grid)
    features = features_from_stats(stats, params)
    dist = det_class_distribution(features, params, flags)
    local = 1 + np.argmax(dist[:, 1:], axis=1)  # best non-background class
    scores = dist[np.arange(n), local]
    reg = features @ params.tensors["det_reg_w"] + params.tensors["det_reg_b"]
    cols = 4 * (local - 1)
    deltas = np.stack([reg[np.arange(n), cols + k] for k in range(4)], axis=1)
    boxes = clip_boxes(
        decode_array(deltas, proposals.boxes), config.image_size, config.image_size
    )
    # per-category NMS, then one global score-descending order
    keep: list[int] = []
    for c in np.unique(local):
        idx = np.flatnonzero(local == c)
        kept = nms(boxes[idx], scores[idx], config.det_nms_iou)
        keep.extend(int(idx[k]) for k in kept)
    order = sorted(keep, key=lambda i: (-scores[i], i))
    categories = np.array([params.category_ids[l - 1] for l in local[order]], dtype=np.int64)
    return DetectionSet(
        boxes=boxes[order],
        categories=categories,
        scores=scores[order],
        distributions=dist[order],
    )


def detect(
    scene: Scene,
    params: DetectorParams,
    flags: VariantFlags,
    config: ModelConfig,
    cache: AnchorStatsCache | None = None,
    anchors: np.ndarray | None = None,
) -> DetectionSet:
    """Two-stage inference: proposals from the RPN, then classified boxes."""
    if cache is not None:
        anchors = cache.anchors
        stats = cache.stats(scene)
    else:
        if anchors is None:
            anchors = build_anchors(config)
        stats = None
    proposals = rpn_forward(scene, anchors, params, flags, config, anchor_stats=stats)
    return box_predictor_forward(scene, proposals, params, flags, config)


def source_distributions(
    source: DetectorParams, scene: Scene, proposal_boxes, config: ModelConfig
) -> np.ndarray:
    """Source-classifier softmax rows for externally supplied proposal boxes."""
    boxes = np.asarray(proposal_boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        return np.zeros((0, source.num_categories + 1))
    stats = stats_matrix(scene.pixels, boxes, config.pool_grid)
    features = features_from_stats(stats, source)
    return softmax_rows(features @ source.tensors["det_cls_w"] + source.tensors["det_cls_b"])


# ---------------------------------------------------------------------------
# checkpoints


def save_params(params: DetectorParams, path) -> None:
    """Versioned JSON checkpoint; floats keep full shortest-repr precision."""
    doc = {
        "format": _CHECKPOINT_FORMAT,
        "version": params.version,
        "category_ids": list(params.category_ids),
        "source_category_count": params.source_category_count,
        "tensors": {
            name: {
                "shape": list(params.tensors[name].shape),
                "data": [float(v) for v in params.tensors[name].ravel()],
            }
            for name in PARAM_TENSORS
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, separators=(",", ":"))


def load_params(path) -> DetectorParams:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognized checkpoint format in {path}")
    tensors = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["tensors"].items()
    }
    return DetectorParams(
        category_ids=tuple(doc["category_ids"]),
        source_category_count=int(doc["source_category_count"]),
        tensors=tensors,
        version=int(doc["version"]),
    )
