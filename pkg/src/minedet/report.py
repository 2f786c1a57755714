"""Deterministic figures from run artifacts: SVG polyline charts and tables.

Charts are emitted as hand-built SVG (fixed palette, fixed decimal
formatting) so identical inputs give identical bytes. A report run scans a
record directory for ``run-*/metrics.csv``, then draws the mAP-vs-iteration
ablation chart, the seed-size sweep, the mined-precision-vs-count curves,
and the per-iteration mined-box table (count plus precision%).
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .mining import CurvePoint, precision_vs_count_curve
from .model import AnchorStatsCache, ModelConfig, build_anchors, load_params
from .scenegen import load_annotations, load_dataset
from .trainer import METRICS_COLUMNS, VARIANTS, variant_flags

PALETTE = ("#1b6ca8", "#c0392b", "#27ae60", "#8e44ad", "#d68910", "#16a085")

WIDTH, HEIGHT = 520, 340
MARGIN_LEFT, MARGIN_RIGHT, MARGIN_TOP, MARGIN_BOTTOM = 58, 16, 34, 44


class ReportError(Exception):
    """Raised when a record directory is missing pieces; names what's absent."""


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    return f"{v:.4g}"


def _ranges(series):
    xs = [x for _, pts in series for x, _ in pts]
    ys = [y for _, pts in series for _, y in pts]
    if not xs:
        raise ReportError("chart has no data points")
    x0, x1, y0, y1 = min(xs), max(xs), min(ys), max(ys)
    if x0 == x1:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y0 == y1:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    return x0, x1, y0 - pad, y1 + pad


def polyline_chart(title: str, x_label: str, y_label: str, series) -> str:
    """series: [(name, [(x, y), ...]), ...] -> standalone SVG text."""
    x0, x1, y0, y1 = _ranges(series)
    plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def sx(x):
        return MARGIN_LEFT + plot_w * (x - x0) / (x1 - x0)

    def sy(y):
        return HEIGHT - MARGIN_BOTTOM - plot_h * (y - y0) / (y1 - y0)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="monospace" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH // 2}" y="18" text-anchor="middle" font-size="13">'
        f"{title}</text>",
    ]
    axis_y = HEIGHT - MARGIN_BOTTOM
    out.append(
        f'<line x1="{MARGIN_LEFT}" y1="{MARGIN_TOP}" x2="{MARGIN_LEFT}" '
        f'y2="{axis_y}" stroke="black"/>'
    )
    out.append(
        f'<line x1="{MARGIN_LEFT}" y1="{axis_y}" x2="{WIDTH - MARGIN_RIGHT}" '
        f'y2="{axis_y}" stroke="black"/>'
    )
    for k in range(5):
        fx = x0 + (x1 - x0) * k / 4
        px = _fmt(sx(fx))
        out.append(
            f'<line x1="{px}" y1="{axis_y}" x2="{px}" y2="{axis_y + 4}" stroke="black"/>'
        )
        out.append(
            f'<text x="{px}" y="{axis_y + 16}" text-anchor="middle">{_tick_label(fx)}</text>'
        )
        fy = y0 + (y1 - y0) * k / 4
        py = _fmt(sy(fy))
        out.append(
            f'<line x1="{MARGIN_LEFT - 4}" y1="{py}" x2="{MARGIN_LEFT}" y2="{py}" '
            f'stroke="black"/>'
        )
        out.append(
            f'<text x="{MARGIN_LEFT - 7}" y="{py}" text-anchor="end" '
            f'dominant-baseline="middle">{_tick_label(fy)}</text>'
        )
    out.append(
        f'<text x="{MARGIN_LEFT + plot_w // 2}" y="{HEIGHT - 8}" '
        f'text-anchor="middle">{x_label}</text>'
    )
    out.append(
        f'<text x="14" y="{MARGIN_TOP + plot_h // 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {MARGIN_TOP + plot_h // 2})">{y_label}</text>'
    )
    for idx, (name, pts) in enumerate(series):
        color = PALETTE[idx % len(PALETTE)]
        coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in pts)
        out.append(
            f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        for x, y in pts:
            out.append(
                f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="2.5" fill="{color}"/>'
            )
        ly = MARGIN_TOP + 12 + 14 * idx
        out.append(
            f'<line x1="{MARGIN_LEFT + 8}" y1="{ly - 4}" x2="{MARGIN_LEFT + 28}" '
            f'y2="{ly - 4}" stroke="{color}" stroke-width="1.5"/>'
        )
        out.append(f'<text x="{MARGIN_LEFT + 33}" y="{ly}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def read_metrics(path) -> list[dict]:
    """Parse a metrics CSV; missing columns are reported by name."""
    path = Path(path)
    if not path.exists():
        raise ReportError(f"no metrics file at {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in METRICS_COLUMNS if c not in header]
        if missing:
            raise ReportError(f"{path} missing column(s): {', '.join(missing)}")
        rows = []
        for rec in reader:
            rows.append(
                {
                    "iteration": int(rec["iteration"]),
                    "variant": rec["variant"],
                    "mAP@0.5": float(rec["mAP@0.5"]),
                    "mAP@[0.5:0.95]": float(rec["mAP@[0.5:0.95]"]),
                    "mined_count": int(rec["mined_count"]),
                    "mined_precision": float(rec["mined_precision"]),
                    "mined_recall": float(rec["mined_recall"]),
                }
            )
    return rows


@dataclass
class RunRecord:
    """One training-mining run's artifacts plus sidecar metadata."""

    path: Path
    rows: list[dict]
    variant: str
    seeds_per_category: int | None = None
    rng_seed: int | None = None
    model: ModelConfig | None = None

    @property
    def label(self) -> str:
        return self.path.name

    def map_points(self) -> list[tuple[float, float]]:
        return [(r["iteration"], r["mAP@0.5"]) for r in self.rows]


def _model_from_meta(meta: dict, where: str) -> ModelConfig | None:
    data = meta.get("model")
    if data is None:
        return None
    data = dict(data)
    if "anchor_scales" in data:
        data["anchor_scales"] = tuple(data["anchor_scales"])
    try:
        return ModelConfig(**data)
    except (TypeError, ValueError) as err:
        raise ReportError(f"{where}: bad model section: {err}") from err


def load_run(run_dir) -> RunRecord:
    run_dir = Path(run_dir)
    rows = read_metrics(run_dir / "metrics.csv")
    if not rows:
        raise ReportError(f"{run_dir / 'metrics.csv'} has no data rows")
    variant = rows[0]["variant"]
    meta_path = run_dir / "run.yaml"
    seeds = rng_seed = model = None
    if meta_path.exists():
        meta = yaml.safe_load(meta_path.read_text()) or {}
        variant = meta.get("variant", variant)
        seeds = meta.get("seeds_per_category")
        rng_seed = meta.get("rng_seed")
        model = _model_from_meta(meta, str(meta_path))
    return RunRecord(run_dir, rows, variant, seeds, rng_seed, model)


def discover_runs(record_dir) -> list[RunRecord]:
    """A record dir is either one run or a directory of run-* subdirs."""
    record_dir = Path(record_dir)
    if (record_dir / "metrics.csv").exists():
        return [load_run(record_dir)]
    runs = [
        load_run(sub)
        for sub in sorted(record_dir.glob("run-*"))
        if (sub / "metrics.csv").exists()
    ]
    if not runs:
        raise ReportError(f"no metrics.csv found under {record_dir}")
    return runs


def ablation_chart(runs: list[RunRecord]) -> str:
    series = [(run.label, run.map_points()) for run in runs]
    return polyline_chart("detection quality by iteration", "iteration", "mAP@0.5", series)


def seed_sweep_chart(runs: list[RunRecord]) -> str:
    """Median mAP@0.5 per iteration, one line per seeds-per-category arm."""
    arms: dict[int, list[RunRecord]] = {}
    for run in runs:
        if run.seeds_per_category is not None:
            arms.setdefault(run.seeds_per_category, []).append(run)
    if not arms:
        raise ReportError(
            "no runs carry seeds_per_category metadata (run.yaml) for the sweep chart"
        )
    series = []
    for k in sorted(arms):
        iters = sorted({r["iteration"] for run in arms[k] for r in run.rows})
        pts = []
        for t in iters:
            vals = [
                r["mAP@0.5"] for run in arms[k] for r in run.rows if r["iteration"] == t
            ]
            pts.append((t, float(np.median(vals))))
        series.append((f"{k} seeds/category", pts))
    return polyline_chart("seed-annotation sweep", "iteration", "median mAP@0.5", series)


def mined_table(runs: list[RunRecord]) -> str:
    """Per-iteration mined count and precision%, one column pair per arm.

    Arms are the distinct variants; where several runs share a variant the
    lowest rng seed is reported (a single run's trajectory, not an average).
    """
    by_variant: dict[str, RunRecord] = {}
    for run in runs:
        key = run.variant
        seen = by_variant.get(key)
        if seen is None or (run.rng_seed or 0) < (seen.rng_seed or 0):
            by_variant[key] = run
    arms = sorted(by_variant)
    iterations = sorted(
        {r["iteration"] for run in by_variant.values() for r in run.rows} - {0}
    )
    header = ["iter"]
    for arm in arms:
        header += [f"{arm} # boxes", f"{arm} prec(%)"]
    lines = [",".join(header)]
    for t in iterations:
        cells = [str(t)]
        for arm in arms:
            row = next(
                (r for r in by_variant[arm].rows if r["iteration"] == t), None
            )
            if row is None:
                cells += ["", ""]
            else:
                # same rendering as metrics.table_entry, from the CSV columns
                cells += [
                    str(row["mined_count"]),
                    f"{row['mined_precision'] * 100:.1f}",
                ]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


DEFAULT_CURVE_THETAS = (0.0, 0.5, 0.8, 0.9, 0.95, 0.99, 0.999, 1.0)


def mined_curves(
    run: RunRecord, dataset_dir, thetas=DEFAULT_CURVE_THETAS
) -> list[tuple[str, list[CurvePoint]]]:
    """Precision-vs-count curve per iteration, recomputed from checkpoints."""
    dataset_dir = Path(dataset_dir)
    if run.variant not in VARIANTS:
        raise ReportError(f"run {run.label}: no named variant to derive flags from")
    flags = variant_flags(run.variant)
    arm = run.seeds_per_category
    ann_path = dataset_dir / (
        f"annotations-{arm}.json" if arm is not None else "annotations.json"
    )
    for name in ("target-train.json", ann_path.name):
        if not (dataset_dir / name).exists():
            raise ReportError(f"run {run.label}: missing {name} for mined curves")
    dataset = load_dataset(dataset_dir / "target-train.json")
    store = load_annotations(ann_path)
    withheld = {
        s.image_id: list(s.gt)
        for s in dataset.scenes
        if s.image_id in store.image_labels
    }
    curves = []
    checkpoints = sorted(
        run.path.glob("checkpoint-iter*.json"),
        key=lambda p: int(re.search(r"iter(\d+)", p.name).group(1)),
    )
    if not checkpoints:
        raise ReportError(f"run {run.label}: no checkpoints for mined curves")
    model = run.model if run.model is not None else ModelConfig()
    cache = AnchorStatsCache(build_anchors(model), model.pool_grid)
    for ckpt in checkpoints:
        params = load_params(ckpt)
        points = precision_vs_count_curve(
            dataset, store.image_labels, withheld, params, flags,
            model, thetas, cache=cache,
        )
        t = int(re.search(r"iter(\d+)", ckpt.name).group(1))
        curves.append((f"iteration {t}", points))
    return curves


def mined_curve_chart(curves) -> str:
    series = [
        (label, [(p.count, 100.0 * p.precision) for p in points])
        for label, points in curves
    ]
    return polyline_chart(
        "mined-box precision vs volume", "# mined boxes", "precision (%)", series
    )


@dataclass
class ReportSummary:
    written: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


def build_report(record_dir, report_dir=None, dataset_dir=None) -> ReportSummary:
    """Emit every figure the record supports; list what was skipped and why."""
    record_dir = Path(record_dir)
    report_dir = Path(report_dir) if report_dir is not None else record_dir / "report"
    dataset_dir = Path(dataset_dir) if dataset_dir is not None else record_dir
    report_dir.mkdir(parents=True, exist_ok=True)
    runs = discover_runs(record_dir)
    summary = ReportSummary()

    def emit(name: str, text: str):
        (report_dir / name).write_text(text)
        summary.written.append(name)

    emit("ablation.svg", ablation_chart(runs))
    emit("mined-boxes.csv", mined_table(runs))
    try:
        emit("seed-sweep.svg", seed_sweep_chart(runs))
    except ReportError as err:
        summary.skipped.append(f"seed-sweep.svg: {err}")
    for run in runs:
        try:
            chart = mined_curve_chart(mined_curves(run, dataset_dir))
        except ReportError as err:
            summary.skipped.append(f"mined-curve-{run.label}.svg: {err}")
            continue
        emit(f"mined-curve-{run.label}.svg", chart)
    return summary
