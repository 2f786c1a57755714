"""Synthetic detection world: rectangle scenes, annotation splits, label noise.

Scenes are small grayscale images containing filled rectangles. Each category
has a base intensity and a vertical stripe period, which is enough texture for
a pooled-statistics feature extractor to tell categories apart. Source and
target categories live in disjoint index ranges so transfer experiments never
leak labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Box, LabeledBox, clip_boxes, pairwise_iou

# rng stream codes so per-scene generators never collide
_STREAM_SOURCE = 1
_STREAM_TARGET = 2

_PLACEMENT_RETRIES = 200

_DATASET_FORMAT = "minedet-dataset-v1"
_ANNOTATION_FORMAT = "minedet-annotations-v1"


class SceneGenerationError(Exception):
    """Raised when a world config cannot be realized (overcrowding, bad split)."""


@dataclass(frozen=True)
class CategoryAppearance:
    """Rendering recipe for one category: fill intensity and stripe period."""

    intensity: float
    stripe_period: int

    def __post_init__(self):
        if not 0.0 < self.intensity <= 1.0:
            raise ValueError(f"intensity must be in (0, 1], got {self.intensity}")
        if self.stripe_period < 1:
            raise ValueError(f"stripe period must be >= 1, got {self.stripe_period}")


def default_appearances(
    num_categories: int, low: float = 0.35, high: float = 0.95
) -> tuple[CategoryAppearance, ...]:
    """Spread intensities over [low, high] and cycle stripe periods 2..5."""
    if num_categories == 1:
        return (CategoryAppearance(round((low + high) / 2, 6), 2),)
    step = (high - low) / (num_categories - 1)
    return tuple(
        CategoryAppearance(round(low + step * i, 6), 2 + i % 4)
        for i in range(num_categories)
    )


@dataclass(frozen=True)
class WorldConfig:
    """Knobs for the synthetic world generator."""

    image_size: int = 32
    num_source_categories: int = 3
    num_target_categories: int = 6
    num_source_images: int = 200
    num_target_images: int = 500
    # 2-3 objects and one mined box per (image, category) means mined images
    # usually still contain unannotated objects — the regime the background
    # mask exists for
    objects_per_image: tuple[int, int] = (2, 3)
    object_size: tuple[float, float] = (8.0, 14.0)
    max_object_iou: float = 0.1
    pixel_noise_sigma: float = 0.05
    seed: int = 0
    appearances: tuple[CategoryAppearance, ...] = field(default=())

    def __post_init__(self):
        if self.num_source_categories < 1 or self.num_target_categories < 1:
            raise ValueError("category counts must be >= 1")
        if self.num_source_images < 0 or self.num_target_images < 0:
            raise ValueError("image counts must be >= 0")
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"objects_per_image range invalid: {self.objects_per_image}")
        slo, shi = self.object_size
        if not 2.0 <= slo <= shi or shi > self.image_size:
            raise ValueError(f"object_size range invalid: {self.object_size}")
        if self.pixel_noise_sigma < 0:
            raise ValueError("pixel_noise_sigma must be >= 0")
        if not self.appearances:
            # source and target scenes never mix, so each split spans its own
            # wide intensity ladder; the target ladder is offset so no target
            # category coincides with a source one (novel, but same family)
            object.__setattr__(
                self,
                "appearances",
                default_appearances(self.num_source_categories)
                + default_appearances(self.num_target_categories, 0.41, 0.89),
            )
        if len(self.appearances) != self.num_categories:
            raise ValueError(
                f"need {self.num_categories} appearances, got {len(self.appearances)}"
            )

    @property
    def num_categories(self) -> int:
        return self.num_source_categories + self.num_target_categories

    @property
    def source_categories(self) -> tuple[int, ...]:
        return tuple(range(1, self.num_source_categories + 1))

    @property
    def target_categories(self) -> tuple[int, ...]:
        first = self.num_source_categories + 1
        return tuple(range(first, first + self.num_target_categories))

    def appearance(self, category: int) -> CategoryAppearance:
        return self.appearances[category - 1]


@dataclass(frozen=True)
class Scene:
    """One rendered image with its groundtruth boxes."""

    image_id: str
    pixels: np.ndarray
    gt: tuple[LabeledBox, ...]

    def __post_init__(self):
        h, w = self.pixels.shape
        for lb in self.gt:
            b = lb.box
            if not (0 <= b.x_min < b.x_max <= w and 0 <= b.y_min < b.y_max <= h):
                raise ValueError(f"gt box {b} outside {w}x{h} image {self.image_id}")

    @property
    def categories(self) -> set[int]:
        return {lb.category for lb in self.gt}


@dataclass(frozen=True)
class Dataset:
    """A list of scenes plus the category indices that may appear in them."""

    scenes: tuple[Scene, ...]
    category_ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.scenes)

    def scene_by_id(self, image_id: str) -> Scene:
        for s in self.scenes:
            if s.image_id == image_id:
                return s
        raise KeyError(image_id)


@dataclass(frozen=True)
class MinedBox:
    """A mined annotation: box, predicted category, score, mining iteration."""

    box: Box
    category: int
    score: float
    iteration: int

    def __post_init__(self):
        if self.category < 1:
            raise ValueError(f"mined box category must be >= 1, got {self.category}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"mined box score must be in [0, 1], got {self.score}")
        if self.iteration < 1:
            raise ValueError(f"mining iteration must be >= 1, got {self.iteration}")

    def as_labeled_box(self) -> LabeledBox:
        return LabeledBox(self.box, self.category, self.score)


@dataclass(frozen=True)
class NoiseSpec:
    """Annotation corruption: drops, spurious boxes, and boundary jitter."""

    fn_rate: float = 0.0
    fp_rate: float = 0.0
    jitter_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.fn_rate <= 1.0:
            raise ValueError(f"fn_rate must be in [0, 1], got {self.fn_rate}")
        if self.fp_rate < 0.0:
            raise ValueError(f"fp_rate must be >= 0, got {self.fp_rate}")
        if self.jitter_sigma < 0.0:
            raise ValueError(f"jitter_sigma must be >= 0, got {self.jitter_sigma}")


@dataclass
class AnnotationStore:
    """Seed boxes, image-level labels, and mined boxes, keyed by image id.

    Seed images carry full boxes and are removed from the weakly labeled
    pool, so ``seed`` and ``image_labels`` never share an image id. Mined
    boxes must agree with the image-level labels of their image.
    """

    seed: dict[str, list[LabeledBox]] = field(default_factory=dict)
    image_labels: dict[str, set[int]] = field(default_factory=dict)
    mined: dict[str, list[MinedBox]] = field(default_factory=dict)

    def validate(self) -> None:
        overlap = self.seed.keys() & self.image_labels.keys()
        if overlap:
            raise ValueError(f"seed and weak pools share image ids: {sorted(overlap)}")
        for image_id, boxes in self.mined.items():
            allowed = self.image_labels.get(image_id, set())
            for mb in boxes:
                if mb.category not in allowed:
                    raise ValueError(
                        f"mined category {mb.category} not in image-level labels "
                        f"of {image_id}"
                    )

    def with_mined(self, mined: dict[str, list[MinedBox]]) -> "AnnotationStore":
        out = AnnotationStore(seed=self.seed, image_labels=self.image_labels, mined=mined)
        out.validate()
        return out

    @property
    def mined_count(self) -> int:
        return sum(len(v) for v in self.mined.values())


def _place_objects(cfg: WorldConfig, categories, rng) -> list[LabeledBox]:
    count = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    placed: list[LabeledBox] = []
    arrs: list[np.ndarray] = []
    for _ in range(count):
        for attempt in range(_PLACEMENT_RETRIES):
            w = int(rng.integers(int(cfg.object_size[0]), int(cfg.object_size[1]) + 1))
            h = int(rng.integers(int(cfg.object_size[0]), int(cfg.object_size[1]) + 1))
            x0 = int(rng.integers(0, cfg.image_size - w + 1))
            y0 = int(rng.integers(0, cfg.image_size - h + 1))
            cand = np.array([x0, y0, x0 + w, y0 + h], dtype=np.float64)
            if arrs and np.max(pairwise_iou(cand[None], np.stack(arrs))) > cfg.max_object_iou:
                continue
            category = int(rng.choice(categories))
            placed.append(LabeledBox(Box(*cand), category))
            arrs.append(cand)
            break
        else:
            raise SceneGenerationError(
                f"could not place object {len(placed) + 1}/{count} within "
                f"{_PLACEMENT_RETRIES} retries; loosen object_size or max_object_iou"
            )
    return placed


def _render_scene(cfg: WorldConfig, image_id: str, boxes, rng) -> Scene:
    size = cfg.image_size
    pixels = np.full((size, size), 0.08, dtype=np.float64)
    for lb in boxes:
        look = cfg.appearance(lb.category)
        x0, y0 = int(lb.box.x_min), int(lb.box.y_min)
        x1, y1 = int(lb.box.x_max), int(lb.box.y_max)
        cols = np.arange(x0, x1)
        stripe = np.where(((cols - x0) // look.stripe_period) % 2 == 0, 1.0, 0.6)
        pixels[y0:y1, x0:x1] = look.intensity * stripe[None, :]
    if cfg.pixel_noise_sigma > 0:
        pixels = pixels + rng.normal(0.0, cfg.pixel_noise_sigma, size=pixels.shape)
    return Scene(image_id=image_id, pixels=np.clip(pixels, 0.0, 1.0), gt=tuple(boxes))


def _generate_split(cfg: WorldConfig, stream: int, prefix: str, count: int, categories):
    scenes = []
    for i in range(count):
        rng = np.random.default_rng([cfg.seed, stream, i])
        boxes = _place_objects(cfg, categories, rng)
        scenes.append(_render_scene(cfg, f"{prefix}-{i:04d}", boxes, rng))
    return Dataset(scenes=tuple(scenes), category_ids=categories)


def generate_world(cfg: WorldConfig) -> tuple[Dataset, Dataset]:
    """Generate the (source, target) datasets for one world seed."""
    source = _generate_split(
        cfg, _STREAM_SOURCE, "src", cfg.num_source_images, cfg.source_categories
    )
    target = _generate_split(
        cfg, _STREAM_TARGET, "tgt", cfg.num_target_images, cfg.target_categories
    )
    return source, target


def split_seed(dataset: Dataset, seeds_per_category: int, rng) -> AnnotationStore:
    """Pick seed images per category; everything else keeps image-level labels.

    For each category (ascending) the sampler draws ``seeds_per_category``
    images that contain it from the not-yet-picked pool. Raises when a
    category has too few remaining images.
    """
    if seeds_per_category < 0:
        raise ValueError("seeds_per_category must be >= 0")
    picked: set[str] = set()
    by_id = {s.image_id: s for s in dataset.scenes}
    for category in dataset.category_ids:
        # seed images picked for earlier categories count toward this quota
        have = sum(1 for img in picked if category in by_id[img].categories)
        need = seeds_per_category - have
        if need <= 0:
            continue
        candidates = sorted(
            s.image_id
            for s in dataset.scenes
            if category in s.categories and s.image_id not in picked
        )
        if len(candidates) < need:
            raise SceneGenerationError(
                f"category {category}: {have} seed images picked and only "
                f"{len(candidates)} more available, need {seeds_per_category}"
            )
        chosen = rng.choice(candidates, size=need, replace=False)
        picked.update(str(c) for c in chosen)
    seed = {img: list(by_id[img].gt) for img in sorted(picked)}
    image_labels = {
        s.image_id: set(s.categories)
        for s in dataset.scenes
        if s.image_id not in picked
    }
    store = AnnotationStore(seed=seed, image_labels=image_labels)
    store.validate()
    return store


def inject_noise(
    boxes,
    spec: NoiseSpec,
    rng,
    image_size: int,
    categories,
) -> list[LabeledBox]:
    """Corrupt labeled boxes: drop, add spurious, jitter boundaries.

    Each input box is dropped with probability ``fn_rate``; a Poisson count
    of spurious boxes with random categories is added; surviving original
    boxes get Gaussian boundary jitter, then everything is clipped back to
    the image and re-validated.
    """
    survivors = [lb for lb in boxes if not (spec.fn_rate > 0 and rng.random() < spec.fn_rate)]
    spurious: list[LabeledBox] = []
    if spec.fp_rate > 0:
        categories = list(categories)
        for _ in range(int(rng.poisson(spec.fp_rate))):
            w = rng.uniform(3.0, 0.5 * image_size)
            h = rng.uniform(3.0, 0.5 * image_size)
            x0 = rng.uniform(0.0, image_size - w)
            y0 = rng.uniform(0.0, image_size - h)
            spurious.append(
                LabeledBox(Box(x0, y0, x0 + w, y0 + h), int(rng.choice(categories)))
            )
    out: list[LabeledBox] = []
    for lb in survivors:
        arr = lb.box.as_array()
        if spec.jitter_sigma > 0:
            arr = arr + rng.normal(0.0, spec.jitter_sigma, size=4)
        arr = clip_boxes(arr[None], image_size, image_size)[0]
        out.append(replace(lb, box=Box.from_array(arr)))
    return out + spurious


# ---------------------------------------------------------------------------
# persistence


def _box_to_json(lb: LabeledBox) -> dict:
    out = {"box": list(lb.box.as_array()), "category": lb.category}
    if lb.score is not None:
        out["score"] = lb.score
    return out


def _box_from_json(rec: dict) -> LabeledBox:
    return LabeledBox(Box.from_array(rec["box"]), rec["category"], rec.get("score"))


def dump_dataset(dataset: Dataset, path) -> None:
    """Write a dataset as line-delimited JSON: header record then one per scene."""
    with open(path, "w") as fh:
        header = {"format": _DATASET_FORMAT, "category_ids": list(dataset.category_ids)}
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for s in dataset.scenes:
            rec = {
                "image_id": s.image_id,
                "height": s.pixels.shape[0],
                "width": s.pixels.shape[1],
                "pixels": [float(v) for v in s.pixels.ravel()],
                "boxes": [_box_to_json(lb) for lb in s.gt],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_dataset(path) -> Dataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != _DATASET_FORMAT:
            raise ValueError(f"unrecognized dataset header in {path}")
        scenes = []
        for line in fh:
            rec = json.loads(line)
            pixels = np.array(rec["pixels"], dtype=np.float64).reshape(
                rec["height"], rec["width"]
            )
            scenes.append(
                Scene(
                    image_id=rec["image_id"],
                    pixels=pixels,
                    gt=tuple(_box_from_json(b) for b in rec["boxes"]),
                )
            )
    return Dataset(scenes=tuple(scenes), category_ids=tuple(header["category_ids"]))


def save_annotations(store: AnnotationStore, path) -> None:
    store.validate()
    doc = {
        "format": _ANNOTATION_FORMAT,
        "seed": {k: [_box_to_json(lb) for lb in v] for k, v in sorted(store.seed.items())},
        "image_labels": {k: sorted(v) for k, v in sorted(store.image_labels.items())},
        "mined": {
            k: [
                {
                    "box": list(mb.box.as_array()),
                    "category": mb.category,
                    "score": mb.score,
                    "iteration": mb.iteration,
                }
                for mb in v
            ]
            for k, v in sorted(store.mined.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, separators=(",", ":"))


def load_annotations(path) -> AnnotationStore:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != _ANNOTATION_FORMAT:
        raise ValueError(f"unrecognized annotation header in {path}")
    store = AnnotationStore(
        seed={k: [_box_from_json(b) for b in v] for k, v in doc["seed"].items()},
        image_labels={k: set(v) for k, v in doc["image_labels"].items()},
        mined={
            k: [
                MinedBox(
                    Box.from_array(m["box"]), m["category"], m["score"], m["iteration"]
                )
                for m in v
            ]
            for k, v in doc["mined"].items()
        },
    )
    store.validate()
    return store
