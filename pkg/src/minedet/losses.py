"""Training losses, the background mask, and analytic gradients.

Structure: ``prepare_item`` runs everything that is treated as constant for a
gradient step (proposal generation, anchor/proposal matching, regression
targets, source-detector distributions). ``batch_loss`` is then a smooth
function of the parameters given those constants, and
``batch_loss_and_gradients`` walks the same graph in reverse. Keeping the two
stages separate is what lets a central finite-difference probe of
``batch_loss`` agree with the analytic gradients to high precision.

Head routing: when a stage's extra classification head is enabled, that
stage's original cls head and its regression head train only on seed items,
while the extra head trains on both pools. With all flags off every enabled
head trains on both pools (the naive baseline). The distillation head trains
on both pools and is the only head, besides the shared extractor, that the
distillation term touches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import LabeledBox, encode_array, match_anchors, pairwise_iou
from .model import (
    DetectorParams,
    ModelConfig,
    VariantFlags,
    build_anchors,
    rpn_forward,
    sigmoid,
    softmax_rows,
    source_distributions,
    stats_matrix,
)
from .scenegen import Scene

SEED = "seed"
MINED = "mined"

PROB_EPS = 1e-7

COMPONENTS = (
    "rpn_cls",
    "rpn_cls_aux",
    "rpn_reg",
    "det_cls",
    "det_cls_aux",
    "det_reg",
    "distill",
)

# gradients are plain dicts of tensors congruent with DetectorParams.tensors
GradientSet = dict[str, np.ndarray]


@dataclass(frozen=True)
class BatchItem:
    """One training image with its boxes and their annotation provenance."""

    scene: Scene
    gt_boxes: tuple[LabeledBox, ...]
    provenance: str

    def __post_init__(self):
        if self.provenance not in (SEED, MINED):
            raise ValueError(f"provenance must be '{SEED}' or '{MINED}'")


@dataclass
class LossBreakdown:
    """Per-head loss values plus the contributing counts they were divided by."""

    rpn_cls: float = 0.0
    rpn_cls_aux: float = 0.0
    rpn_reg: float = 0.0
    det_cls: float = 0.0
    det_cls_aux: float = 0.0
    det_reg: float = 0.0
    distill: float = 0.0
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return (
            self.rpn_cls
            + self.rpn_cls_aux
            + self.rpn_reg
            + self.det_cls
            + self.det_cls_aux
            + self.det_reg
            + self.distill
        )

    def value(self, component: str) -> float:
        return getattr(self, component)


def binary_ce(p: float, target: int) -> float:
    """Two-term binary cross-entropy with probability clamping."""
    pc = min(max(p, PROB_EPS), 1.0 - PROB_EPS)
    return float(-(target * np.log(pc) + (1 - target) * np.log(1.0 - pc)))


def smooth_l1(x) -> np.ndarray | float:
    """0.5 x^2 inside |x| < 1, |x| - 0.5 outside."""
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * ax * ax, ax - 0.5)


def lambda_mask(u: int, provenance: str) -> int:
    """Background-loss indicator: 0 iff the proposal is background on a mined image."""
    return 0 if (u == 0 and provenance == MINED) else 1


# ---------------------------------------------------------------------------
# standalone per-item loss definitions (the readable reference forms)


def rpn_loss(labels, p_cls, p_aux, reg_residuals, provenance, flags) -> LossBreakdown:
    """RPN losses for one item from already-computed probabilities.

    ``labels`` are 0/1 over contributing anchors, ``p_cls``/``p_aux`` the two
    heads' objectness probabilities on those anchors, ``reg_residuals`` the
    (positives, 4) prediction-minus-target deltas.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n_cls = max(len(labels), 1)
    original_trains = provenance == SEED or not flags.rpn_extra_head
    out = LossBreakdown(counts={})
    if original_trains and len(labels):
        out.rpn_cls = float(
            sum(binary_ce(float(p), int(y)) for p, y in zip(p_cls, labels)) / n_cls
        )
        out.counts["rpn_cls"] = len(labels)
    if flags.rpn_extra_head and len(labels):
        out.rpn_cls_aux = float(
            sum(binary_ce(float(p), int(y)) for p, y in zip(p_aux, labels)) / n_cls
        )
        out.counts["rpn_cls_aux"] = len(labels)
    residuals = np.asarray(reg_residuals, dtype=np.float64).reshape(-1, 4)
    if original_trains and len(residuals):
        out.rpn_reg = float(np.sum(smooth_l1(residuals)) / max(len(residuals), 1))
        out.counts["rpn_reg"] = len(residuals)
    return out


def det_loss(u_labels, dist_cls, dist_aux, reg_residuals, provenance, flags) -> LossBreakdown:
    """Box-predictor losses for one item from already-computed distributions.

    ``u_labels`` are per-proposal matched class indices (0 = background),
    ``dist_cls``/``dist_aux`` the two heads' softmax rows, ``reg_residuals``
    the (matched, 4) residuals for non-background proposals.
    """
    u = np.asarray(u_labels, dtype=np.int64)
    out = LossBreakdown(counts={})
    original_trains = provenance == SEED or not flags.det_extra_head

    def ce_rows(dist, rows):
        p = np.clip(dist[rows, u[rows]], PROB_EPS, 1.0 - PROB_EPS)
        return float(np.sum(-np.log(p)))

    all_rows = np.arange(len(u))
    if original_trains and len(u):
        out.det_cls = ce_rows(np.asarray(dist_cls, dtype=np.float64), all_rows) / max(len(u), 1)
        out.counts["det_cls"] = len(u)
    if flags.det_extra_head and len(u):
        if flags.det_zero_background:
            kept = np.array([lambda_mask(int(ui), provenance) == 1 for ui in u])
            rows = all_rows[kept]
        else:
            rows = all_rows
        if len(rows):
            out.det_cls_aux = ce_rows(np.asarray(dist_aux, dtype=np.float64), rows) / len(rows)
        out.counts["det_cls_aux"] = len(rows)
    residuals = np.asarray(reg_residuals, dtype=np.float64).reshape(-1, 4)
    if original_trains and len(residuals):
        out.det_reg = float(np.sum(smooth_l1(residuals)) / max(len(residuals), 1))
        out.counts["det_reg"] = len(residuals)
    return out


def distill_loss(p, p_star) -> float:
    """Average soft cross-entropy from source rows p* to predicted rows p."""
    p = np.asarray(p, dtype=np.float64)
    p_star = np.asarray(p_star, dtype=np.float64).reshape(p.shape)
    if p.shape[0] == 0:
        return 0.0
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return float(np.sum(-p_star * np.log(pc)) / p.shape[0])


# ---------------------------------------------------------------------------
# prepared batches


@dataclass
class PreparedItem:
    """Stop-gradient constants for one item's loss evaluation.

    Each loss component keeps its own row-subset statistics matrix: the
    masked det-cls-a loss must be bitwise independent of rows it ignores, so
    it never sees them, not even through a shared matrix.
    """

    provenance: str
    proposal_boxes: np.ndarray
    rpn_stats: np.ndarray
    rpn_labels: np.ndarray
    rpn_pos_stats: np.ndarray
    rpn_reg_targets: np.ndarray
    det_stats: np.ndarray
    det_labels: np.ndarray
    det_aux_stats: np.ndarray
    det_aux_labels: np.ndarray
    det_pos_stats: np.ndarray
    det_pos_labels: np.ndarray
    det_reg_targets: np.ndarray
    source_dist: np.ndarray | None


def prepare_item(
    item: BatchItem,
    params: DetectorParams,
    flags: VariantFlags,
    config: ModelConfig,
    source: DetectorParams | None = None,
    anchors: np.ndarray | None = None,
    anchor_stats: np.ndarray | None = None,
    proposals: np.ndarray | None = None,
) -> PreparedItem:
    """Run the non-differentiated part of a training step for one item.

    Proposals come from the current detector (plus the item's own boxes, so
    the second stage always sees positives) unless an explicit array is
    given. Everything returned is constant w.r.t. the parameters.
    """
    if flags.distill and source is None:
        raise ValueError("distillation requires a source detector")
    scene = item.scene
    d = config.input_dim
    if anchors is None:
        anchors = build_anchors(config)
    if anchor_stats is None:
        anchor_stats = stats_matrix(scene.pixels, anchors, config.pool_grid)

    if item.gt_boxes:
        gt_arr = np.stack([lb.box.as_array() for lb in item.gt_boxes])
        gt_local = np.array([params.local_index(lb.category) for lb in item.gt_boxes])
    else:
        gt_arr = np.zeros((0, 4))
        gt_local = np.zeros(0, dtype=np.int64)

    assign = match_anchors(anchors, gt_arr, config.rpn_pos_iou, config.rpn_neg_iou)
    contrib = assign.contributing_indices
    pos = assign.positive_indices
    rpn_reg_targets = (
        encode_array(gt_arr[assign.gt_index[pos]], anchors[pos])
        if len(pos)
        else np.zeros((0, 4))
    )

    if proposals is None:
        pset = rpn_forward(scene, anchors, params, flags, config, anchor_stats=anchor_stats)
        pboxes = pset.boxes
        if len(gt_arr):
            pboxes = np.concatenate([pboxes, gt_arr], axis=0)
    else:
        pboxes = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)

    m = pboxes.shape[0]
    if m and len(gt_arr):
        overlaps = pairwise_iou(pboxes, gt_arr)
        best = overlaps.argmax(axis=1)
        best_iou = overlaps[np.arange(m), best]
        u = np.where(best_iou >= config.det_pos_iou, gt_local[best], 0)
    else:
        best = np.zeros(m, dtype=np.int64)
        u = np.zeros(m, dtype=np.int64)

    det_stats = stats_matrix(scene.pixels, pboxes, config.pool_grid) if m else np.zeros((0, d))
    if flags.det_zero_background:
        keep = np.array([lambda_mask(int(ui), item.provenance) == 1 for ui in u], dtype=bool)
    else:
        keep = np.ones(m, dtype=bool)
    q = u > 0
    det_reg_targets = (
        encode_array(gt_arr[best[q]], pboxes[q]) if np.any(q) else np.zeros((0, 4))
    )
    source_dist = (
        source_distributions(source, scene, pboxes, config) if flags.distill else None
    )
    return PreparedItem(
        provenance=item.provenance,
        proposal_boxes=pboxes,
        rpn_stats=anchor_stats[contrib],
        rpn_labels=(assign.labels[contrib] == 1).astype(np.float64),
        rpn_pos_stats=anchor_stats[pos],
        rpn_reg_targets=rpn_reg_targets,
        det_stats=det_stats,
        det_labels=u,
        det_aux_stats=det_stats[keep],
        det_aux_labels=u[keep],
        det_pos_stats=det_stats[q],
        det_pos_labels=u[q],
        det_reg_targets=det_reg_targets,
        source_dist=source_dist,
    )


# ---------------------------------------------------------------------------
# batch loss and gradients


def _component_enabled(component: str, flags: VariantFlags) -> bool:
    if component == "rpn_cls_aux":
        return flags.rpn_extra_head
    if component == "det_cls_aux":
        return flags.det_extra_head
    if component == "distill":
        return flags.distill
    return True


def _item_contributes(component: str, provenance: str, flags: VariantFlags) -> bool:
    if component in ("rpn_cls", "rpn_reg"):
        return provenance == SEED or not flags.rpn_extra_head
    if component in ("det_cls", "det_reg"):
        return provenance == SEED or not flags.det_extra_head
    return True


def _component_rows(component: str, it: PreparedItem) -> int:
    if component in ("rpn_cls", "rpn_cls_aux"):
        return it.rpn_stats.shape[0]
    if component == "rpn_reg":
        return it.rpn_pos_stats.shape[0]
    if component in ("det_cls", "distill"):
        return it.det_stats.shape[0]
    if component == "det_cls_aux":
        return it.det_aux_stats.shape[0]
    return it.det_pos_stats.shape[0]  # det_reg


_HEAD_TENSORS = {
    "rpn_cls": ("rpn_cls_w", "rpn_cls_b"),
    "rpn_cls_aux": ("rpn_cls_aux_w", "rpn_cls_aux_b"),
    "rpn_reg": ("rpn_reg_w", "rpn_reg_b"),
    "det_cls": ("det_cls_w", "det_cls_b"),
    "det_cls_aux": ("det_cls_aux_w", "det_cls_aux_b"),
    "det_reg": ("det_reg_w", "det_reg_b"),
    "distill": ("det_cls_src_w", "det_cls_src_b"),
}


def _component_inputs(component: str, it: PreparedItem):
    """(stats matrix, per-row targets) consumed by one loss component."""
    if component in ("rpn_cls", "rpn_cls_aux"):
        return it.rpn_stats, it.rpn_labels
    if component == "rpn_reg":
        return it.rpn_pos_stats, it.rpn_reg_targets
    if component == "det_cls":
        return it.det_stats, it.det_labels
    if component == "det_cls_aux":
        return it.det_aux_stats, it.det_aux_labels
    if component == "det_reg":
        return it.det_pos_stats, (it.det_pos_labels, it.det_reg_targets)
    return it.det_stats, it.source_dist  # distill


def _soft_ce(probs: np.ndarray, weights: np.ndarray):
    """Sum of -w * log(clamp(p)) with the gradient of that sum w.r.t. logits.

    ``weights`` rows are one-hot for hard cross-entropy or arbitrary
    distributions for the soft case. Entries pushed outside the clamp range
    contribute constant loss and therefore zero gradient.
    """
    clamped = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    loss = float(np.sum(-weights * np.log(clamped)))
    inside = (probs > PROB_EPS) & (probs < 1.0 - PROB_EPS)
    g = np.where(inside, -weights / clamped, 0.0)
    gp = g * probs
    dz = gp - probs * gp.sum(axis=1, keepdims=True)
    return loss, dz


def _head_forward_backward(component, it, params, flags):
    """Raw (unnormalized) loss sum and per-row logit gradients for one item."""
    stats, target = _component_inputs(component, it)
    if stats.shape[0] == 0:
        return 0.0, None, None, None
    features = np.tanh(stats @ params.tensors["extractor_w"] + params.tensors["extractor_b"])
    w_name, b_name = _HEAD_TENSORS[component]
    z = features @ params.tensors[w_name] + params.tensors[b_name]

    if component in ("rpn_cls", "rpn_cls_aux"):
        p = sigmoid(z)[:, 0]
        y = target
        pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
        loss = float(np.sum(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))))
        inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
        dz = np.where(inside, p - y, 0.0)[:, None]
    elif component in ("det_cls", "det_cls_aux"):
        probs = softmax_rows(z)
        onehot = np.zeros_like(probs)
        onehot[np.arange(len(target)), target] = 1.0
        loss, dz = _soft_ce(probs, onehot)
    elif component == "distill":
        probs = softmax_rows(z)
        loss, dz = _soft_ce(probs, target)
    else:  # rpn_reg or det_reg: smooth L1 on residuals
        if component == "det_reg":
            labels, targets = target
            cols = 4 * (labels - 1)
            idx = cols[:, None] + np.arange(4)[None, :]
            pred = np.take_along_axis(z, idx, axis=1)
        else:
            targets = target
            pred = z
        diff = pred - targets
        loss = float(np.sum(smooth_l1(diff)))
        ddiff = np.where(np.abs(diff) < 1.0, diff, np.sign(diff))
        if component == "det_reg":
            dz = np.zeros_like(z)
            np.put_along_axis(dz, idx, ddiff, axis=1)
        else:
            dz = ddiff
    return loss, dz, features, stats


def _accumulate(prepared, params, flags, components, want_grads):
    components = COMPONENTS if components is None else tuple(components)
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown loss components: {sorted(unknown)}")
    breakdown = LossBreakdown(counts={})
    grads: GradientSet | None = params.zeros_like() if want_grads else None

    for component in components:
        if not _component_enabled(component, flags):
            continue
        rows = sum(
            _component_rows(component, it)
            for it in prepared
            if _item_contributes(component, it.provenance, flags)
        )
        breakdown.counts[component] = rows
        norm = max(rows, 1)
        total = 0.0
        for it in prepared:
            if not _item_contributes(component, it.provenance, flags):
                continue
            loss, dz, features, stats = _head_forward_backward(component, it, params, flags)
            total += loss
            if dz is None or grads is None:
                continue
            if not np.all(np.isfinite(dz)):
                raise ValueError(f"non-finite gradient in component {component}")
            dz = dz / norm
            w_name, b_name = _HEAD_TENSORS[component]
            grads[w_name] += features.T @ dz
            grads[b_name] += dz.sum(axis=0)
            dfeat = dz @ params.tensors[w_name].T
            dpre = dfeat * (1.0 - features * features)
            grads["extractor_w"] += stats.T @ dpre
            grads["extractor_b"] += dpre.sum(axis=0)
        value = total / norm
        if not np.isfinite(value):
            raise ValueError(f"non-finite loss in component {component}")
        setattr(breakdown, component, value)
    return breakdown, grads


def batch_loss(
    prepared: list[PreparedItem],
    params: DetectorParams,
    flags: VariantFlags,
    components=None,
) -> LossBreakdown:
    """Smooth loss of the parameters given prepared constants."""
    breakdown, _ = _accumulate(prepared, params, flags, components, want_grads=False)
    return breakdown


def batch_loss_and_gradients(
    prepared: list[PreparedItem],
    params: DetectorParams,
    flags: VariantFlags,
    components=None,
) -> tuple[LossBreakdown, GradientSet]:
    breakdown, grads = _accumulate(prepared, params, flags, components, want_grads=True)
    return breakdown, grads


def loss_and_gradients(
    batch: list[BatchItem],
    params: DetectorParams,
    flags: VariantFlags,
    config: ModelConfig,
    source: DetectorParams | None = None,
    anchors: np.ndarray | None = None,
    stats_cache=None,
    components=None,
) -> tuple[LossBreakdown, GradientSet]:
    """Prepare every item at the current parameters, then differentiate."""
    if anchors is None:
        anchors = stats_cache.anchors if stats_cache is not None else build_anchors(config)
    prepared = [
        prepare_item(
            item,
            params,
            flags,
            config,
            source=source,
            anchors=anchors,
            anchor_stats=stats_cache.stats(item.scene) if stats_cache is not None else None,
        )
        for item in batch
    ]
    return batch_loss_and_gradients(prepared, params, flags, components=components)
