"""Optimizer against a closed-form trajectory; loop plumbing and artifacts."""

import numpy as np
import pytest

import minedet.trainer as trainer_mod
from minedet.losses import BatchItem, SEED, loss_and_gradients
from minedet.mining import MiningConfig, mine_boxes
from minedet.model import (
    AnchorStatsCache,
    ModelConfig,
    VariantFlags,
    build_anchors,
    load_params,
)
from minedet.scenegen import Dataset, WorldConfig, generate_world, split_seed
from minedet.trainer import (
    METRICS_COLUMNS,
    ExperimentRecord,
    IterationResult,
    TrainConfig,
    TrainingError,
    build_schedule,
    momentum_step,
    run_training_mining,
    train_detector,
    train_source_detector,
    variant_flags,
    write_metric_row,
)

CFG = ModelConfig()


class TestMomentumStep:
    def test_matches_hand_rolled_quadratic_trajectory(self):
        # f(w) = w^2 / 2, grad = w; lr 0.1, mu 0.9 from w0 = 1:
        #   v1 = -0.1,   w1 = 0.9
        #   v2 = 0.9*(-0.1)   - 0.1*0.9  = -0.18,  w2 = 0.72
        #   v3 = 0.9*(-0.18)  - 0.1*0.72 = -0.234, w3 = 0.486
        w = {"w": np.array([1.0])}
        v = {"w": np.array([0.0])}
        seen = []
        for _ in range(3):
            momentum_step(w, {"w": w["w"].copy()}, v, 0.1, 0.9)
            seen.append(float(w["w"][0]))
        assert np.allclose(seen, [0.9, 0.72, 0.486], rtol=0, atol=1e-12)

    def test_zero_momentum_is_plain_sgd(self):
        w = {"a": np.array([2.0, -1.0])}
        v = {"a": np.zeros(2)}
        g = {"a": np.array([0.5, 0.25])}
        momentum_step(w, g, v, 0.1, 0.0)
        assert np.array_equal(w["a"], np.array([2.0 - 0.05, -1.0 - 0.025]))

    def test_updates_all_tensors_in_place(self):
        w = {"a": np.ones(3), "b": np.full((2, 2), 2.0)}
        v = {k: np.zeros_like(t) for k, t in w.items()}
        refs = {k: t for k, t in w.items()}
        momentum_step(w, {k: np.ones_like(t) for k, t in w.items()}, v, 0.5, 0.9)
        for k in w:
            assert w[k] is refs[k]
            assert np.array_equal(w[k], np.full_like(w[k], 0.5 if k == "a" else 1.5))


class TestTrainConfig:
    def test_rejects_bad_values(self):
        for kw in (
            {"learning_rate": 0.0},
            {"momentum": 1.0},
            {"momentum": -0.1},
            {"epochs": -1},
            {"iterations": -1},
            {"variant": "no-such-variant"},
            {"variant": "custom"},  # needs custom_flags
        ):
            with pytest.raises(ValueError):
                TrainConfig(**kw)

    def test_custom_variant_carries_flags(self):
        flags = VariantFlags(det_extra_head=True)
        config = TrainConfig(variant="custom", custom_flags=flags)
        assert variant_flags(config.variant, config.custom_flags) == flags

    def test_variant_flags_rejects_bare_custom(self):
        with pytest.raises(ValueError):
            variant_flags("custom")


class TestSchedule:
    def test_constant_variants(self):
        naive = build_schedule(TrainConfig(variant="naive", iterations=4))
        assert len(naive) == 5
        assert all(f == VariantFlags() for f in naive)
        full = build_schedule(TrainConfig(variant="det-az-rpn-a", iterations=2))
        assert all(f.det_extra_head and f.det_zero_background and f.rpn_extra_head
                   for f in full)
        assert not any(f.distill for f in full)

    def test_half_distill_drops_after_midpoint(self):
        schedule = build_schedule(TrainConfig(variant="half-distill", iterations=4))
        assert [f.distill for f in schedule] == [True, True, True, False, False]
        assert all(f.det_extra_head and f.rpn_extra_head for f in schedule)

    def test_half_distill_custom_boundary(self):
        schedule = build_schedule(
            TrainConfig(variant="half-distill", iterations=4, distill_boundary=0)
        )
        assert [f.distill for f in schedule] == [True, False, False, False, False]


class TestExperimentRecord:
    @staticmethod
    def result(t, mined=0):
        return IterationResult(t, "naive", 0.5, 0.3, mined, 0.0, 0.0, 1.0)

    def test_validate_passes_contiguous(self):
        rec = ExperimentRecord("naive", [self.result(0), self.result(1, 3)])
        rec.validate()
        assert rec.final().iteration == 1

    def test_validate_rejects_gap(self):
        rec = ExperimentRecord("naive", [self.result(0), self.result(2)])
        with pytest.raises(ValueError):
            rec.validate()

    def test_validate_rejects_mined_at_zero(self):
        rec = ExperimentRecord("naive", [self.result(0, mined=2)])
        with pytest.raises(ValueError):
            rec.validate()


def tiny_world():
    source, target = generate_world(
        WorldConfig(num_source_images=20, num_target_images=60, seed=13)
    )
    store = split_seed(target, 2, np.random.default_rng(0))
    return source, target, store


class TestTrainDetector:
    def setup_method(self):
        self.source, self.target, self.store = tiny_world()
        self.config = TrainConfig(learning_rate=0.01, epochs=2, seed=3)
        rng = np.random.default_rng(5)
        self.params = trainer_mod.init_params(
            CFG, self.target.category_ids, len(self.target.category_ids), rng
        )

    def test_zero_epochs_returns_unchanged_copy(self):
        config = TrainConfig(epochs=0)
        out = train_detector(
            self.params, self.target, self.store.seed, {}, config, VariantFlags()
        )
        assert out is not self.params
        for name, t in self.params.tensors.items():
            assert np.array_equal(out.tensors[name], t)

    def test_empty_pools_return_unchanged(self):
        out = train_detector(
            self.params, self.target, {}, {}, self.config, VariantFlags()
        )
        for name, t in self.params.tensors.items():
            assert np.array_equal(out.tensors[name], t)

    def test_does_not_mutate_init(self):
        before = {k: t.copy() for k, t in self.params.tensors.items()}
        train_detector(
            self.params, self.target, self.store.seed, {}, self.config, VariantFlags()
        )
        for name, t in self.params.tensors.items():
            assert np.array_equal(t, before[name])

    def test_deterministic_given_seed(self):
        runs = [
            train_detector(
                self.params, self.target, self.store.seed, {}, self.config,
                VariantFlags(), rng=np.random.default_rng(9),
            )
            for _ in range(2)
        ]
        for name in runs[0].tensors:
            assert np.array_equal(runs[0].tensors[name], runs[1].tensors[name])

    def test_training_reduces_seed_pool_loss(self):
        by_id = {s.image_id: s for s in self.target.scenes}
        items = [
            BatchItem(by_id[i], tuple(boxes), SEED)
            for i, boxes in sorted(self.store.seed.items())
        ]
        cache = AnchorStatsCache(build_anchors(CFG), CFG.pool_grid)
        flags = VariantFlags()

        def total(params):
            return sum(
                loss_and_gradients([it], params, flags, CFG, stats_cache=cache)[0].total
                for it in items
            )

        config = TrainConfig(learning_rate=0.01, epochs=10, seed=3)
        trained = train_detector(
            self.params, self.target, self.store.seed, {}, config, flags, cache=cache
        )
        assert total(trained) < total(self.params)

    def test_distill_requires_source(self):
        with pytest.raises(ValueError, match="source"):
            train_detector(
                self.params, self.target, self.store.seed, {}, self.config,
                VariantFlags(distill=True),
            )

    def test_failure_message_carries_epoch_and_image(self, monkeypatch):
        def boom(*args, **kwargs):
            raise ValueError("synthetic failure")

        monkeypatch.setattr(trainer_mod, "loss_and_gradients", boom)
        with pytest.raises(TrainingError, match=r"epoch 0, image [\w-]+: synthetic"):
            train_detector(
                self.params, self.target, self.store.seed, {}, self.config,
                VariantFlags(),
            )


class TestSourceDetector:
    def test_empty_source_rejected(self):
        empty = Dataset(scenes=[], category_ids=(0, 1))
        with pytest.raises(ValueError):
            train_source_detector(empty, TrainConfig(epochs=1))

    def test_learns_source_world_held_out(self):
        # scenes derive per-index rng streams, so the first 60 of this
        # 100-image world equal the 60-image world used elsewhere
        source, _ = generate_world(
            WorldConfig(num_source_images=100, num_target_images=1, seed=11)
        )
        train = Dataset(scenes=source.scenes[:60], category_ids=source.category_ids)
        held_out = Dataset(scenes=source.scenes[60:], category_ids=source.category_ids)
        config = TrainConfig(
            learning_rate=0.02, epochs=300, seed=5, model=ModelConfig(num_proposals=12)
        )
        params = train_source_detector(train, config)
        sweep, at_half = trainer_mod.evaluate_detector(
            params, VariantFlags(), held_out, config.model
        )
        assert at_half >= 0.8
        # golden held-out score for this exact config, recorded at first run
        assert at_half == pytest.approx(GOLDEN_SOURCE_MAP_HALF, abs=1e-9)
        assert 0.0 < sweep <= at_half


GOLDEN_SOURCE_MAP_HALF = 0.8891936995008395  # recorded from the first seeded run


@pytest.fixture(scope="module")
def world():
    source, target, store = tiny_world()
    config = TrainConfig(
        learning_rate=0.02, epochs=15, seed=5, model=ModelConfig(num_proposals=8)
    )
    return train_source_detector(source, config), target, store


class TestTrainingMiningLoop:
    def loop_config(self, **kw):
        base = dict(
            learning_rate=0.01, epochs=2, iterations=2, theta_b=0.1,
            variant="det-az-rpn-a", seed=1, model=ModelConfig(num_proposals=8),
        )
        base.update(kw)
        return TrainConfig(**base)

    def test_record_shape_and_mining_engagement(self, world):
        source, target, store = world
        record = run_training_mining(source, target, store, target, self.loop_config())
        assert [r.iteration for r in record.results] == [0, 1, 2]
        assert record.results[0].mined_count == 0
        # theta_b 0.1 is permissive enough that some boxes get mined
        assert record.results[-1].mined_count > 0
        record.validate()

    def test_zero_iterations_trains_once(self, world):
        source, target, store = world
        record = run_training_mining(
            source, target, store, target, self.loop_config(iterations=0)
        )
        assert len(record.results) == 1
        assert record.results[0].mined_count == 0

    def test_rerun_is_bit_identical(self, world):
        source, target, store = world
        runs = [
            run_training_mining(source, target, store, target, self.loop_config())
            for _ in range(2)
        ]
        a, b = runs
        assert [r.map_half for r in a.results] == [r.map_half for r in b.results]
        assert [r.mined_count for r in a.results] == [r.mined_count for r in b.results]

    def test_checkpoint_warm_start_reproduces_next_iteration(self, world, tmp_path):
        source, target, store = world
        config = self.loop_config(iterations=1)
        run_training_mining(source, target, store, target, config, out_dir=tmp_path)
        schedule = build_schedule(config)
        cache = AnchorStatsCache(build_anchors(config.model), config.model.pool_grid)
        params0 = load_params(tmp_path / "checkpoint-iter0.json")
        mined = mine_boxes(
            target, store.image_labels, params0, schedule[0], config.model,
            MiningConfig(theta_b=config.theta_b), 1, cache=cache,
        )
        redone = train_detector(
            params0, target, store.seed, mined, config, schedule[1],
            cache=cache, rng=np.random.default_rng([config.seed, 5, 1]),
        )
        saved = load_params(tmp_path / "checkpoint-iter1.json")
        for name in saved.tensors:
            assert np.array_equal(saved.tensors[name], redone.tensors[name])

    def test_artifacts_written(self, world, tmp_path):
        source, target, store = world
        record = run_training_mining(
            source, target, store, target, self.loop_config(), out_dir=tmp_path
        )
        assert (tmp_path / "metrics.csv").exists()
        assert (tmp_path / "timings.csv").exists()
        for t in range(3):
            assert (tmp_path / f"checkpoint-iter{t}.json").exists()
        for t in (1, 2):
            assert (tmp_path / f"mined-iter{t}.jsonl").exists()
        assert record.results[1].mined_path is not None

    def test_metrics_csv_is_timing_free_and_stable(self, world, tmp_path):
        source, target, store = world
        d1, d2 = tmp_path / "a", tmp_path / "b"
        for d in (d1, d2):
            run_training_mining(source, target, store, target, self.loop_config(),
                                out_dir=d)
        m1 = (d1 / "metrics.csv").read_bytes()
        assert m1 == (d2 / "metrics.csv").read_bytes()
        header = m1.decode().splitlines()[0]
        assert header.split(",") == list(METRICS_COLUMNS)
        assert "wall_clock" not in header


class TestWriteMetricRow:
    def test_appends_with_header_once(self, tmp_path):
        r1 = IterationResult(0, "naive", 0.5, 0.25, 0, 0.0, 0.0, 2.0)
        r2 = IterationResult(1, "naive", 0.625, 0.5, 7, 1.0, 0.125, 3.0)
        write_metric_row(tmp_path, r1)
        write_metric_row(tmp_path, r2)
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert len(lines) == 3
        assert lines[1].startswith("0,naive,0.5,0.25,0,")
        assert lines[2].startswith("1,naive,0.625,0.5,7,")
        timing_lines = (tmp_path / "timings.csv").read_text().splitlines()
        assert timing_lines[0] == "iteration,variant,wall_clock_s"
        assert len(timing_lines) == 3
