"""Momentum-SGD training and the iterative training-mining loop.

One run alternates: train the detector on seed plus currently mined boxes
(warm-started from the previous iteration), evaluate, then re-mine the whole
weakly labeled pool with the new detector. Iteration 0 trains on the seed
boxes alone. Variants are expressed as a per-iteration flag schedule so the
distillation term can switch off halfway through a run.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

from pathlib import Path

import numpy as np

from .losses import MINED, SEED, BatchItem, loss_and_gradients
from .metrics import MiningQuality, map_sweep, mined_box_quality
from .mining import MiningConfig, dump_mined, mine_boxes
from .model import (
    AnchorStatsCache,
    DetectorParams,
    ModelConfig,
    VariantFlags,
    build_anchors,
    detect,
    init_from_source,
    init_params,
    save_params,
)
from .scenegen import AnnotationStore, Dataset

# rng stream codes (world generation uses 1 and 2)
_STREAM_SOURCE_TRAIN = 3
_STREAM_INIT = 4
_STREAM_ITERATION = 5

METRICS_COLUMNS = (
    "iteration",
    "variant",
    "mAP@0.5",
    "mAP@[0.5:0.95]",
    "mined_count",
    "mined_precision",
    "mined_recall",
)

VARIANTS = {
    "naive": VariantFlags(),
    "det-a": VariantFlags(det_extra_head=True),
    "det-az": VariantFlags(det_extra_head=True, det_zero_background=True),
    "det-az-rpn-a": VariantFlags(
        det_extra_head=True, det_zero_background=True, rpn_extra_head=True
    ),
    "det-az-rpn-a-distill": VariantFlags(
        det_extra_head=True, det_zero_background=True, rpn_extra_head=True, distill=True
    ),
    "half-distill": VariantFlags(
        det_extra_head=True, det_zero_background=True, rpn_extra_head=True, distill=True
    ),
}


class TrainingError(Exception):
    """Raised when training or mining fails; message carries loop context."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and loop hyperparameters."""

    learning_rate: float = 0.003
    momentum: float = 0.9
    epochs: int = 20
    iterations: int = 4
    theta_b: float = 0.99
    variant: str = "det-az-rpn-a"
    distill_boundary: int | None = None
    custom_flags: VariantFlags | None = None
    flag_schedule: tuple[VariantFlags, ...] | None = None
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.variant == "custom":
            if self.custom_flags is None and self.flag_schedule is None:
                raise ValueError(
                    "variant 'custom' needs custom_flags or flag_schedule"
                )
        elif self.variant not in VARIANTS:
            raise ValueError(
                f"unknown variant {self.variant!r}; pick one of "
                f"{sorted(VARIANTS)} or 'custom'"
            )
        if self.flag_schedule is not None:
            if self.variant != "custom":
                raise ValueError("flag_schedule requires variant 'custom'")
            if len(self.flag_schedule) != self.iterations + 1:
                raise ValueError(
                    f"flag_schedule needs {self.iterations + 1} entries "
                    f"(iterations 0..{self.iterations}), got {len(self.flag_schedule)}"
                )


def variant_flags(name: str, custom: VariantFlags | None = None) -> VariantFlags:
    if name == "custom":
        if custom is None:
            raise ValueError("variant 'custom' needs custom_flags")
        return custom
    return VARIANTS[name]


def build_schedule(config: TrainConfig) -> tuple[VariantFlags, ...]:
    """Flags for iterations 0..T inclusive.

    The half-distill schedule keeps distillation on through the midpoint
    iteration (configurable via ``distill_boundary``) and drops it after.
    An explicit ``flag_schedule`` bypasses the named variants entirely.
    """
    if config.flag_schedule is not None:
        return tuple(config.flag_schedule)
    base = variant_flags(config.variant, config.custom_flags)
    schedule = []
    for t in range(config.iterations + 1):
        if config.variant == "half-distill":
            boundary = (
                config.distill_boundary
                if config.distill_boundary is not None
                else config.iterations // 2
            )
            schedule.append(replace(base, distill=t <= boundary))
        else:
            schedule.append(base)
    return tuple(schedule)


@dataclass
class IterationResult:
    iteration: int
    variant: str
    map_half: float
    map_full_sweep: float
    mined_count: int
    mined_precision: float
    mined_recall: float
    wall_clock_s: float
    checkpoint_path: str | None = None
    mined_path: str | None = None


@dataclass
class ExperimentRecord:
    variant: str
    results: list[IterationResult] = field(default_factory=list)

    def validate(self) -> None:
        for t, r in enumerate(self.results):
            if r.iteration != t:
                raise ValueError(f"iteration indices not contiguous at {t}")
        if self.results and self.results[0].mined_count != 0:
            raise ValueError("iteration 0 must have an empty mined set")

    def final(self) -> IterationResult:
        return self.results[-1]


def momentum_step(tensors, grads, velocity, learning_rate: float, momentum: float) -> None:
    """v <- mu*v - lr*grad; w <- w + v, in place over congruent dicts."""
    for name, w in tensors.items():
        v = velocity[name]
        v *= momentum
        v -= learning_rate * grads[name]
        w += v


def _pool_items(dataset: Dataset, seed_pool, mined_pool) -> list[BatchItem]:
    by_id = {s.image_id: s for s in dataset.scenes}
    items = [
        BatchItem(by_id[img], tuple(seed_pool[img]), SEED) for img in sorted(seed_pool)
    ]
    items += [
        BatchItem(by_id[img], tuple(mb.as_labeled_box() for mb in mined_pool[img]), MINED)
        for img in sorted(mined_pool)
    ]
    return items


def train_detector(
    init: DetectorParams,
    dataset: Dataset,
    seed_pool: dict,
    mined_pool: dict,
    config: TrainConfig,
    flags: VariantFlags,
    source: DetectorParams | None = None,
    cache: AnchorStatsCache | None = None,
    rng=None,
) -> DetectorParams:
    """Momentum SGD over shuffled single-item batches; returns new params."""
    if flags.distill and source is None:
        raise ValueError("distillation requires a source detector")
    params = init.copy()
    items = _pool_items(dataset, seed_pool, mined_pool)
    if not items or config.epochs == 0:
        return params
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if cache is None:
        cache = AnchorStatsCache(build_anchors(config.model), config.model.pool_grid)
    velocity = params.zeros_like()
    for epoch in range(config.epochs):
        order = rng.permutation(len(items))
        for pos in order:
            item = items[int(pos)]
            try:
                _, grads = loss_and_gradients(
                    [item], params, flags, config.model, source=source, stats_cache=cache
                )
            except ValueError as err:
                raise TrainingError(
                    f"epoch {epoch}, image {item.scene.image_id}: {err}"
                ) from err
            momentum_step(
                params.tensors, grads, velocity, config.learning_rate, config.momentum
            )
    return params


def train_source_detector(
    source_dataset: Dataset, config: TrainConfig, rng=None
) -> DetectorParams:
    """Train a plain (all flags off) detector on fully annotated source data."""
    if not len(source_dataset):
        raise ValueError("source dataset is empty")
    if rng is None:
        rng = np.random.default_rng([config.seed, _STREAM_SOURCE_TRAIN])
    params = init_params(
        config.model,
        source_dataset.category_ids,
        len(source_dataset.category_ids),
        rng,
    )
    seed_pool = {s.image_id: list(s.gt) for s in source_dataset.scenes}
    return train_detector(
        params, source_dataset, seed_pool, {}, config, VariantFlags(), rng=rng
    )


def evaluate_detector(
    params: DetectorParams,
    flags: VariantFlags,
    dataset: Dataset,
    model_config: ModelConfig,
    cache: AnchorStatsCache | None = None,
) -> tuple[float, float]:
    """(mAP over the IoU sweep, mAP at 0.5) on a fully annotated split."""
    detections_by_cat: dict[int, list] = {c: [] for c in dataset.category_ids}
    gts_by_cat: dict[int, list] = {c: [] for c in dataset.category_ids}
    for scene in dataset.scenes:
        for lb in scene.gt:
            gts_by_cat[lb.category].append((scene.image_id, lb.box.as_array()))
        out = detect(scene, params, flags, model_config, cache=cache)
        for i in range(len(out)):
            detections_by_cat.setdefault(int(out.categories[i]), []).append(
                (scene.image_id, float(out.scores[i]), out.boxes[i])
            )
    return map_sweep(detections_by_cat, gts_by_cat)


def _append_csv(path: Path, columns, row) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(columns)
        writer.writerow(row)


def write_metric_row(out_dir: Path, result: IterationResult) -> None:
    """Metrics CSV is timing-free so reruns are byte-identical; wall clock
    goes to timings.csv next to it."""
    _append_csv(
        out_dir / "metrics.csv",
        METRICS_COLUMNS,
        [
            result.iteration,
            result.variant,
            repr(result.map_half),
            repr(result.map_full_sweep),
            result.mined_count,
            repr(result.mined_precision),
            repr(result.mined_recall),
        ],
    )
    _append_csv(
        out_dir / "timings.csv",
        ("iteration", "variant", "wall_clock_s"),
        [result.iteration, result.variant, repr(result.wall_clock_s)],
    )


def run_training_mining(
    source: DetectorParams,
    dataset: Dataset,
    store: AnnotationStore,
    eval_dataset: Dataset,
    config: TrainConfig,
    out_dir=None,
) -> ExperimentRecord:
    """The full loop: init from source, train on seeds, then mine/retrain."""
    store.validate()
    schedule = build_schedule(config)
    mining = MiningConfig(theta_b=config.theta_b)
    cache = AnchorStatsCache(build_anchors(config.model), config.model.pool_grid)
    withheld_gt = {
        s.image_id: list(s.gt)
        for s in dataset.scenes
        if s.image_id in store.image_labels
    }
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        # reruns overwrite rather than append, so the CSVs stay reproducible
        for name in ("metrics.csv", "timings.csv"):
            (out_path / name).unlink(missing_ok=True)

    record = ExperimentRecord(variant=config.variant)
    params = init_from_source(
        source,
        dataset.category_ids,
        config.model,
        np.random.default_rng([config.seed, _STREAM_INIT]),
    )
    mined: dict = {}
    for t in range(config.iterations + 1):
        started = time.perf_counter()
        flags = schedule[t]
        if t > 0:
            try:
                mined = mine_boxes(
                    dataset, store.image_labels, params, schedule[t - 1],
                    config.model, mining, t, cache=cache,
                )
            except Exception as err:
                raise TrainingError(f"iteration {t}: mining failed: {err}") from err
        quality = (
            mined_box_quality(mined, withheld_gt)
            if t > 0
            else MiningQuality(0, 0, sum(len(v) for v in withheld_gt.values()))
        )
        try:
            params = train_detector(
                params, dataset, store.seed, mined, config, flags,
                source=source if flags.distill else None,
                cache=cache,
                rng=np.random.default_rng([config.seed, _STREAM_ITERATION, t]),
            )
        except TrainingError as err:
            raise TrainingError(f"iteration {t}: {err}") from err
        sweep, at_half = evaluate_detector(params, flags, eval_dataset, config.model, cache=cache)
        result = IterationResult(
            iteration=t,
            variant=config.variant,
            map_half=at_half,
            map_full_sweep=sweep,
            mined_count=quality.mined_count,
            mined_precision=quality.precision,
            mined_recall=quality.recall,
            wall_clock_s=time.perf_counter() - started,
        )
        if out_path is not None:
            checkpoint = out_path / f"checkpoint-iter{t}.json"
            save_params(params, checkpoint)
            result.checkpoint_path = str(checkpoint)
            if t > 0:
                mined_file = out_path / f"mined-iter{t}.jsonl"
                dump_mined(mined, mined_file)
                result.mined_path = str(mined_file)
            write_metric_row(out_path, result)
        record.results.append(result)
    record.validate()
    return record
