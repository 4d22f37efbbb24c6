#!/usr/bin/env python3
"""
Tests for the schedule, the training loop and its on-disk outputs.
"""

import csv
import json
import threading

import numpy as np
import pytest
from pydantic import ValidationError

import trainer
from checkpoint import load_checkpoint, read_checkpoint
from conftest import tiny_spec
from data_pipeline import Dataset, load_cifar
from errors import (
    ConfigError,
    RunCancelledError,
    ScheduleError,
    SpecValidationError,
    TrainingDivergedError,
)
from model_builder import build_network
from optim import SGDNesterov
from tensor_core import Tensor, softmax_cross_entropy
from trainer import (
    DEFAULT_MILESTONES,
    METRICS_HEADER,
    TrainConfig,
    evaluate,
    evaluate_checkpoint,
    load_datasets,
    lr_at,
    parse_milestones,
    read_normalization,
    scale_milestones,
    train,
    train_config_from_section,
)


def quick_config(**overrides):
    values = dict(epochs=2, batch_size=8, milestones=((1, 0.05),), seed=3)
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def splits(cifar10_dir):
    directory, _ = cifar10_dir
    return load_cifar(directory, "cifar10", "train"), load_cifar(directory, "cifar10", "test")


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


class TestSchedule:
    def test_default_steps(self):
        config = TrainConfig()
        assert lr_at(0, config) == 0.1
        assert lr_at(149, config) == 0.1
        assert lr_at(150, config) == 0.01
        assert lr_at(200, config) == 0.001
        assert lr_at(260, config) == 0.0002
        assert lr_at(279, config) == 0.0002

    def test_piecewise_constant(self):
        config = TrainConfig()
        changes = [e for e in range(1, 280) if lr_at(e, config) != lr_at(e - 1, config)]
        assert changes == [150, 200, 250]

    @pytest.mark.parametrize("epoch", [-1, 280, 1000])
    def test_out_of_range(self, epoch):
        with pytest.raises(ScheduleError):
            lr_at(epoch, TrainConfig())

    def test_parse_milestones(self):
        assert parse_milestones("150:0.01, 200:0.001") == ((150, 0.01), (200, 0.001))
        with pytest.raises(ValueError):
            parse_milestones("150")

    def test_non_increasing_milestones_rejected(self):
        with pytest.raises(ValidationError):
            TrainConfig(milestones=((200, 0.01), (150, 0.001)))

    def test_scaled_milestones(self):
        assert TrainConfig().with_epochs(5).milestones == ((2, 0.01), (3, 0.001), (4, 0.0002))

    def test_scaling_collapses_collisions(self):
        assert scale_milestones(DEFAULT_MILESTONES, 280, 2) == ((1, 0.0002),)

    def test_section_scales_default_milestones(self):
        config = train_config_from_section({"epochs": "5", "batch_size": "32"})
        assert config.epochs == 5 and config.batch_size == 32
        assert config.milestones == ((2, 0.01), (3, 0.001), (4, 0.0002))

    def test_section_keeps_explicit_milestones(self):
        config = train_config_from_section({"epochs": "3", "milestones": "1:0.05"})
        assert config.milestones == ((1, 0.05),)

    def test_section_errors(self):
        with pytest.raises(ConfigError):
            train_config_from_section({"momentum": "2"})
        with pytest.raises(ConfigError):
            train_config_from_section({"epochs": "3", "milestones": "5:0.1,2:0.01"})


class TestTrain:
    def test_zero_epochs(self, tmp_path, splits):
        spec = tiny_spec(input_size=32)
        result = train(spec, quick_config(epochs=0, milestones=()), splits[0], out_dir=tmp_path)
        assert read_rows(result.metrics_path) == [list(METRICS_HEADER)]
        ckpt = read_checkpoint(result.final_checkpoint)
        assert ckpt.epoch == 0
        initial = build_network(spec, np.random.default_rng(3)).state()
        for name, value in initial.items():
            np.testing.assert_array_equal(ckpt.tensors[name], value)

    def test_deterministic_outputs(self, tmp_path, splits):
        spec = tiny_spec("abc", input_size=32)
        first = train(spec, quick_config(), *splits, out_dir=tmp_path / "a")
        second = train(spec, quick_config(workers=2), *splits, out_dir=tmp_path / "b")
        assert first.metrics_path.read_bytes() == second.metrics_path.read_bytes()
        assert first.final_checkpoint.read_bytes() == second.final_checkpoint.read_bytes()

    def test_outputs_on_disk(self, tmp_path, splits):
        result = train(tiny_spec(input_size=32), quick_config(), *splits, out_dir=tmp_path)
        rows = read_rows(result.metrics_path)
        assert len(rows) == 3
        assert [r[0] for r in rows[1:]] == ["0", "1"]
        assert [r[1] for r in rows[1:]] == ["0.1", "0.05"]
        assert all(r[-1] == "0.000" for r in rows[1:])
        assert (tmp_path / "epoch_1.spnf").is_file()
        assert result.best_checkpoint == tmp_path / "best.spnf"
        summary = read_rows(tmp_path / "summary.csv")
        assert summary[0] == ["checkpoint", "epoch", "test_loss", "test_error"]
        assert [r[0] for r in summary[1:]] == ["eval_final", "eval_best"]
        assert summary[1][1] == "2"
        record = json.loads((tmp_path / "run_config.json").read_text())
        assert record["train_samples"] == 40 and record["test_samples"] == 12
        mean, std = read_normalization(tmp_path)
        assert len(mean) == 3 and all(s > 0 for s in std)

    def test_read_normalization_without_record(self, tmp_path):
        assert read_normalization(tmp_path) is None
        (tmp_path / "run_config.json").write_text('{"model": {}}')
        with pytest.raises(ConfigError, match="normalization"):
            read_normalization(tmp_path)
        (tmp_path / "run_config.json").write_text("{")
        with pytest.raises(ConfigError, match="JSON"):
            read_normalization(tmp_path)

    def test_wall_time_recorded_on_request(self, tmp_path, splits):
        result = train(tiny_spec(input_size=32), quick_config(epochs=1, record_wall_time=True),
                       splits[0], out_dir=tmp_path)
        assert float(read_rows(result.metrics_path)[1][-1]) > 0

    def test_class_count_mismatch(self, tmp_path, splits):
        with pytest.raises(SpecValidationError):
            train(tiny_spec(input_size=32, num_classes=100), quick_config(), splits[0], out_dir=tmp_path)

    def test_cancel(self, tmp_path, splits):
        event = threading.Event()
        event.set()
        with pytest.raises(RunCancelledError):
            train(tiny_spec(input_size=32), quick_config(), splits[0], out_dir=tmp_path, cancel_event=event)

    def test_divergence_reports_step(self, tmp_path, splits, monkeypatch):
        calls = {"n": 0}

        def poisoned(logits, labels):
            calls["n"] += 1
            if calls["n"] == 3:
                return Tensor(np.array(np.nan))
            return softmax_cross_entropy(logits, labels)

        monkeypatch.setattr(trainer, "softmax_cross_entropy", poisoned)
        with pytest.raises(TrainingDivergedError) as err:
            train(tiny_spec(input_size=32), quick_config(), splits[0], out_dir=tmp_path)
        assert err.value.step == 2

    def test_progress_callback(self, tmp_path, splits):
        seen = []
        train(tiny_spec(input_size=32), quick_config(), splits[0], out_dir=tmp_path,
              progress_callback=lambda done, total, row: seen.append((done, total, row.epoch)))
        assert seen == [(1, 2, 0), (2, 2, 1)]

    def test_limit_applies_to_both_splits(self, cifar10_dir):
        directory, _ = cifar10_dir
        train_split, test_split = load_datasets(directory, quick_config(limit=5))
        assert (len(train_split), len(test_split)) == (5, 5)


class TestEvaluate:
    def test_leaves_model_untouched(self, rng, splits):
        model = build_network(tiny_spec(input_size=32), rng)
        before = {k: v.copy() for k, v in model.state().items()}
        row = evaluate(model, splits[1], batch_size=5)
        for name, value in model.state().items():
            np.testing.assert_array_equal(value, before[name])
        assert 0.0 <= row.test_error <= 1.0
        assert row.test_loss > 0

    def test_checkpoint_round_trip_gives_identical_row(self, tmp_path, splits):
        spec = tiny_spec(input_size=32)
        result = train(spec, quick_config(epochs=1, milestones=()), splits[0], out_dir=tmp_path)
        model, _ = load_checkpoint(result.final_checkpoint, spec)
        direct = evaluate(model, splits[1])
        restored = evaluate_checkpoint(result.final_checkpoint, spec, splits[1])
        assert (direct.test_loss, direct.test_error) == (restored.test_loss, restored.test_error)
        assert restored.epoch == 1


def memorize(variant, steps=500):
    rng = np.random.default_rng(0)
    model = build_network(tiny_spec(variant, blocks=(2, 2, 2), growth_rate=8), rng)
    images = Tensor(rng.standard_normal((8, 3, 8, 8)))
    labels = np.arange(8)
    optimizer = SGDNesterov(model.parameters(), momentum=0.9, weight_decay=0.0)
    losses = []
    for _ in range(steps):
        optimizer.zero_grad()
        loss = softmax_cross_entropy(model.forward(images, training=True), labels)
        loss.backward()
        optimizer.step(0.1)
        losses.append(float(loss.data))
    return model, images, labels, losses


class TestLearning:
    def test_memorizes_eight_samples(self):
        model, images, labels, losses = memorize("abc")
        assert min(losses) < 0.01
        data = Dataset(images.data, labels, 10, "train")
        assert evaluate(model, data).test_error == 0.0

    def test_gate_does_not_hinder_optimization(self):
        abc = memorize("abc")[3][-1]
        bc = memorize("bc")[3][-1]
        assert abc <= max(1.1 * bc, 0.01)

    @pytest.mark.slow
    def test_desk_scale_smoke(self, tmp_path, cifar10_full):
        spec = tiny_spec("bc", blocks=(2, 2, 2), growth_rate=8, path=2, input_size=32)
        config = TrainConfig(batch_size=64, seed=0, limit=2000).with_epochs(5)
        train_split, _ = load_datasets(cifar10_full, config)
        result = train(spec, config, train_split, out_dir=tmp_path / "first")
        losses = [row.train_loss for row in result.rows]
        assert all(b < a for a, b in zip(losses, losses[1:]))
        assert result.rows[-1].train_error < 0.65

        train(spec, config, train_split, out_dir=tmp_path / "repeat")
        produced = sorted(p.name for p in (tmp_path / "first").iterdir())
        assert produced == sorted(p.name for p in (tmp_path / "repeat").iterdir())
        for name in produced:
            assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "repeat" / name).read_bytes(), name

    @pytest.mark.slow
    def test_loss_decreases_over_two_epochs_for_most_seeds(self, tmp_path, cifar10_full):
        spec = tiny_spec("bc", blocks=(1, 1, 1), growth_rate=4, path=2, input_size=32)
        decreasing = 0
        for seed in range(10):
            config = TrainConfig(seed=seed, limit=256).with_epochs(2)
            train_split, _ = load_datasets(cifar10_full, config)
            result = train(spec, config, train_split, out_dir=tmp_path / f"seed{seed}")
            first, second = (row.train_loss for row in result.rows)
            decreasing += second < first
        assert decreasing >= 9

    @pytest.mark.slow
    def test_untrained_model_is_at_chance(self, cifar10_full):
        model = build_network(tiny_spec("bc", input_size=32), np.random.default_rng(0))
        test_split = load_cifar(cifar10_full, "cifar10", "test")
        assert evaluate(model, test_split).test_error == pytest.approx(0.90, abs=0.03)
