#!/usr/bin/env python3
"""
Tests for the command-line surface and its exit codes.
"""

import csv
import io
import re

import numpy as np
import pytest

from analyzers import CSV_FIELDS
from checkpoint import save_checkpoint
from cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from config import network_spec_from_section, parse_config_text
from model_builder import build_network

V1BC = """
[model]
variant = bc
blocks = 8-12-16
growth_rate = 16
path = 14
"""

TINY = """
[model]
variant = abc
blocks = 1-1-1
growth_rate = 4
path = 2

[train]
epochs = 1
batch_size = 8
milestones =
seed = 1
"""

SWEEP = """
[sweep]
variant = bc
blocks = 8-12-16
growth_rates = 16
paths = 14
split_stride = 7
"""


@pytest.fixture
def write_cfg(tmp_path):
    def write(name, text):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return write


class TestUsage:
    def test_no_arguments(self, capsys):
        assert main([]) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand(self):
        assert main(["frobnicate"]) == EXIT_USAGE

    def test_unknown_flag(self):
        assert main(["analyze", "--preset", "sparsenet-bc-v1", "--colour"]) == EXIT_USAGE

    def test_model_required(self):
        assert main(["analyze"]) == EXIT_USAGE

    def test_preset_and_config_conflict(self, write_cfg):
        assert main(["analyze", "--preset", "sparsenet-bc-v1", "--config", write_cfg("a.cfg", V1BC)]) == EXIT_USAGE

    def test_bad_budget(self):
        assert main(["solve-path", "--preset", "sparsenet-bc-v1", "--budget", "lots"]) == EXIT_USAGE

    def test_train_needs_data_dir(self, write_cfg, monkeypatch):
        monkeypatch.delenv("SPARSENET_DATA_DIR", raising=False)
        assert main(["train", "--config", write_cfg("t.cfg", TINY), "--data-dir", ""]) == EXIT_USAGE

    def test_help_exits_zero(self):
        assert main(["--help"]) == EXIT_OK


class TestAnalysisCommands:
    def test_analyze_csv(self, write_cfg, capsys):
        assert main(["analyze", "--config", write_cfg("v1bc.cfg", V1BC), "--format", "csv"]) == EXIT_OK
        rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
        assert tuple(rows[0]) == CSV_FIELDS
        assert len(rows) == 2
        assert rows[1][2] == "76"

    def test_inspect_path_two(self, write_cfg, capsys):
        assert main(["inspect", "--config", write_cfg("p2.cfg", V1BC.replace("path = 14", "path = 2"))]) == EXIT_OK
        layers = [line for line in capsys.readouterr().out.splitlines() if line.strip().startswith("layer")]
        assert len(layers) == 36
        for line in layers:
            sources = re.search(r"sources \[([\d,]*)\]", line).group(1).split(",")
            assert len(sources) <= 2

    def test_solve_path(self, capsys):
        assert main(["solve-path", "--preset", "sparsenet-bc-v1", "--budget", "10M"]) == EXIT_OK
        assert capsys.readouterr().out.startswith("path 16:")

    def test_sweep(self, write_cfg, tmp_path, capsys):
        out = tmp_path / "sweep" / "points.csv"
        assert main(["sweep", "--config", write_cfg("s.cfg", SWEEP), "--out", str(out)]) == EXIT_OK
        printed = capsys.readouterr().out
        assert len(printed.splitlines()) == 4
        assert out.read_text() == printed


class TestRuntimeErrors:
    def test_missing_config(self, tmp_path):
        assert main(["analyze", "--config", str(tmp_path / "absent.cfg")]) == EXIT_RUNTIME

    def test_invalid_spec(self, write_cfg):
        assert main(["analyze", "--config", write_cfg("bad.cfg", V1BC.replace("path = 14", "path = 0"))]) == EXIT_RUNTIME

    def test_budget_too_small(self):
        assert main(["solve-path", "--preset", "sparsenet-bc-v1", "--budget", "1K"]) == EXIT_RUNTIME

    def test_missing_dataset(self, write_cfg, tmp_path):
        assert main(["train", "--config", write_cfg("t.cfg", TINY), "--data-dir", str(tmp_path)]) == EXIT_RUNTIME

    @pytest.mark.parametrize("run_config", [
        "{}",
        "{not json",
        '{"normalization": {"mean": [0, 0, 0]}}',
        '{"normalization": {"mean": [0, 0, 0], "std": [1, 0, 1]}}',
        '{"normalization": {"mean": [0, 0], "std": [1, 1]}}',
    ])
    def test_unusable_run_config(self, write_cfg, cifar10_dir, tmp_path, run_config):
        directory, _ = cifar10_dir
        run = tmp_path / "run"
        run.mkdir()
        spec = network_spec_from_section(parse_config_text(TINY).model)
        save_checkpoint(build_network(spec, np.random.default_rng(0)), run / "final.spnf")
        (run / "run_config.json").write_text(run_config)
        code = main(["eval", "--config", write_cfg("t.cfg", TINY), "--data-dir", str(directory),
                     "--checkpoint", str(run / "final.spnf")])
        assert code == EXIT_RUNTIME


class TestTrainAndEval:
    def test_round_trip(self, write_cfg, cifar10_dir, tmp_path, capsys):
        directory, _ = cifar10_dir
        cfg = write_cfg("t.cfg", TINY)
        run = tmp_path / "run"
        assert main(["train", "--config", cfg, "--data-dir", str(directory), "--out", str(run)]) == EXIT_OK
        trained = capsys.readouterr().out
        assert (run / "metrics.csv").is_file()
        final_error = re.search(r"final test error: ([\d.]+)", trained).group(1)

        assert main(["eval", "--config", cfg, "--data-dir", str(directory),
                     "--checkpoint", str(run / "final.spnf"), "--format", "csv"]) == EXIT_OK
        rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
        assert rows[0] == ["epoch", "test_loss", "test_error"]
        assert rows[1][0] == "1"
        assert float(rows[1][2]) == pytest.approx(float(final_error), abs=1e-4)
