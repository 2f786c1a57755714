"""Pipeline runner: dataset generation, training, mining, eval, reports.

Every subcommand is driven by one experiment file (``--config``) plus a few
override flags; all artifacts land under the output directory so a whole
experiment is reproducible from (config, seed) alone. Failures exit nonzero
with a single ``error:`` line on stderr. Set ``NOTERCNN_LOG=info`` (or
``debug``) for progress logging.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from .config import ConfigError, ExperimentConfig, load_config
from .metrics import mined_box_quality, table_entry
from .mining import MiningConfig, dump_mined, mine_boxes
from .model import load_params, save_params
from .report import ReportError, build_report
from .scenegen import (
    Dataset,
    SceneGenerationError,
    dump_dataset,
    generate_world,
    load_annotations,
    load_dataset,
    save_annotations,
    split_seed,
)
from .trainer import (
    TrainingError,
    evaluate_detector,
    run_training_mining,
    train_source_detector,
    variant_flags,
)

log = logging.getLogger("minedet")

_SPLIT_STREAM = 40  # rng stream for the seed/weak split (world gen uses 1-2)

SOURCE_CHECKPOINT = "checkpoint-source.json"


def _configure_logging() -> None:
    name = os.environ.get("NOTERCNN_LOG", "warning").strip().lower()
    level = {
        "debug": logging.DEBUG,
        "info": logging.INFO,
        "warning": logging.WARNING,
        "error": logging.ERROR,
    }.get(name, logging.WARNING)
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    train = cfg.train
    if args.seed is not None:
        train = replace(train, seed=args.seed)
    if args.variant is not None:
        train = replace(train, variant=args.variant, custom_flags=None, flag_schedule=None)
    if args.iterations is not None:
        train = replace(train, iterations=args.iterations)
    if args.theta_b is not None:
        train = replace(train, theta_b=args.theta_b)
    out_dir = args.out if args.out is not None else cfg.out_dir
    if out_dir is None:
        raise ConfigError(
            "missing required field 'out_dir': set it in the config or pass --out"
        )
    return dataclasses.replace(cfg, train=train, out_dir=str(out_dir))


def _data_paths(cfg: ExperimentConfig) -> dict[str, Path]:
    out = Path(cfg.out_dir)
    paths = {
        "source": out / "source.json",
        "train": out / "target-train.json",
        "eval": out / "target-eval.json",
    }
    for k in cfg.seeds_per_category:
        paths[f"annotations-{k}"] = out / f"annotations-{k}.json"
    return paths


def cmd_gen_data(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source, target = generate_world(cfg.world)
    n_eval = cfg.eval_images
    train_pool = Dataset(
        scenes=target.scenes[: len(target.scenes) - n_eval],
        category_ids=target.category_ids,
    )
    eval_pool = Dataset(
        scenes=target.scenes[len(target.scenes) - n_eval :],
        category_ids=target.category_ids,
    )
    paths = _data_paths(cfg)
    dump_dataset(source, paths["source"])
    dump_dataset(train_pool, paths["train"])
    dump_dataset(eval_pool, paths["eval"])
    for k in cfg.seeds_per_category:
        store = split_seed(
            train_pool, k, np.random.default_rng([cfg.world.seed, _SPLIT_STREAM])
        )
        save_annotations(store, paths[f"annotations-{k}"])
    for name, path in paths.items():
        log.info("wrote %s (%s)", path, name)
    print(f"wrote datasets and {len(cfg.seeds_per_category)} seed split(s) to {out}")
    return 0


def _ensure_data(cfg: ExperimentConfig) -> dict[str, Path]:
    paths = _data_paths(cfg)
    if not all(p.exists() for p in paths.values()):
        log.info("dataset files missing; generating")
        cmd_gen_data(cfg)
    return paths


def _source_config(cfg: ExperimentConfig):
    return cfg.source_train if cfg.source_train is not None else cfg.train


def _ensure_source(cfg: ExperimentConfig, paths) -> "object":
    ckpt = Path(cfg.out_dir) / SOURCE_CHECKPOINT
    if ckpt.exists():
        log.info("loading cached source detector from %s", ckpt)
        return load_params(ckpt)
    source_ds = load_dataset(paths["source"])
    log.info("training source detector on %d images", len(source_ds))
    params = train_source_detector(source_ds, _source_config(cfg))
    save_params(params, ckpt)
    log.info("wrote %s", ckpt)
    return params


def cmd_train_source(cfg: ExperimentConfig) -> int:
    paths = _ensure_data(cfg)
    ckpt = Path(cfg.out_dir) / SOURCE_CHECKPOINT
    ckpt.unlink(missing_ok=True)
    params = _ensure_source(cfg, paths)
    source_ds = load_dataset(paths["source"])
    sweep, at_half = evaluate_detector(
        params, variant_flags("naive"), source_ds, _source_config(cfg).model
    )
    print(f"wrote {ckpt}")
    print(f"source train-set mAP@0.5 {at_half:.4f} mAP@[0.5:0.95] {sweep:.4f}")
    return 0


def _run_dir_name(k: int, rng_seed: int, variant: str) -> str:
    return f"run-seeds{k}-rng{rng_seed}-{variant}"


def cmd_run(cfg: ExperimentConfig) -> int:
    paths = _ensure_data(cfg)
    source = _ensure_source(cfg, paths)
    train_pool = load_dataset(paths["train"])
    eval_pool = load_dataset(paths["eval"])
    if not len(eval_pool):
        raise ConfigError("eval_images is 0; nothing to evaluate runs against")
    for k in cfg.seeds_per_category:
        store = load_annotations(paths[f"annotations-{k}"])
        for rng_seed in cfg.rng_seeds:
            train = replace(cfg.train, seed=rng_seed)
            run_dir = Path(cfg.out_dir) / _run_dir_name(k, rng_seed, train.variant)
            run_dir.mkdir(parents=True, exist_ok=True)
            meta = {
                "variant": train.variant,
                "seeds_per_category": k,
                "rng_seed": rng_seed,
                "theta_b": train.theta_b,
                "model": dataclasses.asdict(train.model),
            }
            (run_dir / "run.yaml").write_text(yaml.safe_dump(meta, sort_keys=True))
            log.info("starting %s", run_dir.name)
            record = run_training_mining(
                source, train_pool, store, eval_pool, train, out_dir=run_dir
            )
            final = record.final()
            print(
                f"{run_dir.name}: iterations 0-{final.iteration}, "
                f"final mAP@0.5 {final.map_half:.4f}, "
                f"mined {final.mined_count} boxes"
            )
    return 0


def cmd_mine(cfg: ExperimentConfig, checkpoint: str, iteration: int) -> int:
    paths = _ensure_data(cfg)
    params = load_params(checkpoint)
    train_pool = load_dataset(paths["train"])
    k = cfg.seeds_per_category[0]
    store = load_annotations(paths[f"annotations-{k}"])
    flags = variant_flags(cfg.train.variant, cfg.train.custom_flags)
    mined = mine_boxes(
        train_pool,
        store.image_labels,
        params,
        flags,
        cfg.train.model,
        MiningConfig(theta_b=cfg.train.theta_b),
        iteration,
    )
    out = Path(cfg.out_dir) / "mined.jsonl"
    dump_mined(mined, out)
    withheld = {
        s.image_id: list(s.gt)
        for s in train_pool.scenes
        if s.image_id in store.image_labels
    }
    quality = mined_box_quality(mined, withheld)
    print(f"wrote {out}")
    print(f"mined boxes, precision(%): {table_entry(quality)}")
    return 0


def cmd_eval(cfg: ExperimentConfig, checkpoint: str) -> int:
    paths = _ensure_data(cfg)
    params = load_params(checkpoint)
    eval_pool = load_dataset(paths["eval"])
    flags = variant_flags(cfg.train.variant, cfg.train.custom_flags)
    sweep, at_half = evaluate_detector(params, flags, eval_pool, cfg.train.model)
    print(f"mAP@0.5 {at_half:.6f}")
    print(f"mAP@[0.5:0.95] {sweep:.6f}")
    return 0


def cmd_report(cfg: ExperimentConfig) -> int:
    summary = build_report(cfg.out_dir)
    report_dir = Path(cfg.out_dir) / "report"
    for name in summary.written:
        print(f"wrote {report_dir / name}")
    for reason in summary.skipped:
        log.warning("skipped %s", reason)
    return 0


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="experiment YAML file")
    shared.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
    shared.add_argument("--seed", type=int, metavar="N", help="training rng seed override")
    shared.add_argument("--variant", metavar="NAME", help="training variant override")
    shared.add_argument("--iterations", type=int, metavar="N", help="mining iterations override")
    shared.add_argument("--theta-b", type=float, metavar="X", dest="theta_b",
                        help="mining score threshold override")

    parser = argparse.ArgumentParser(
        prog="minedet",
        description="training-mining loop for a detector on a synthetic world",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[shared],
                   help="generate datasets and seed/weak splits")
    sub.add_parser("train-source", parents=[shared],
                   help="train the fully supervised source detector")
    sub.add_parser("run", parents=[shared],
                   help="full training-mining loop for every configured arm")
    mine = sub.add_parser("mine", parents=[shared],
                          help="mine boxes from the weak pool with a checkpoint")
    mine.add_argument("checkpoint", help="detector checkpoint to mine with")
    mine.add_argument("--iteration", type=int, default=1,
                      help="iteration tag recorded on mined boxes")
    ev = sub.add_parser("eval", parents=[shared],
                        help="evaluate a checkpoint on the held-out split")
    ev.add_argument("checkpoint", help="detector checkpoint to evaluate")
    sub.add_parser("report", parents=[shared],
                   help="emit SVG charts and tables from run artifacts")
    return parser


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _experiment(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train-source":
            return cmd_train_source(cfg)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "mine":
            return cmd_mine(cfg, args.checkpoint, args.iteration)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.command == "report":
            return cmd_report(cfg)
        raise ValueError(f"unknown command {args.command}")
    except (ConfigError, ReportError, TrainingError, SceneGenerationError,
            ValueError, OSError) as err:
        message = "; ".join(str(err).splitlines()) or err.__class__.__name__
        print(f"error: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
