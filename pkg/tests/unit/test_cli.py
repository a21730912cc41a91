# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.
"""Unit tests for the command-line interface."""
import csv
import io
import json
import os

import numpy as np
import pytest

import cli
from checks import CheckResult
from container import save_bank, save_checkpoint
from dataset import synthetic_image
from imaging import ColorImage, write_image
from network import build_network, zero_cnn
from trainer import TrainingError


def _records(output: str):
    return [json.loads(line) for line in output.strip().splitlines()]


@pytest.fixture()
def identity_checkpoint(tmp_path, tiny_config):
    """Return path of a tiny checkpoint whose network is the identity."""
    path = str(tmp_path / "identity.ckpt")
    save_checkpoint(path, zero_cnn(build_network(tiny_config)), tiny_config)
    return path


@pytest.fixture()
def image_dir(tmp_path):
    """Return directory holding two 36x36 grayscale images."""
    directory = tmp_path / "images"
    directory.mkdir()
    for seed in (0, 1):
        write_image(str(directory / f"{seed}.png"), ColorImage(synthetic_image(36, 36, seed)))
    return str(directory)


def test_params_report(capsys):
    """Test parameter counts and memory of the standard configuration with defaults."""
    assert cli.main(["analyze", "params"]) == cli.EXIT_OK
    (record,) = _records(capsys.readouterr().out)
    assert record["weights"] == 620288
    assert record["biases"] == 956
    assert record["vdsr_delta"] == 44416
    assert record["bytes_per_value"] == 1
    assert record["activation_memory"] == 4 * 2**20


def test_params_report_float32_accounting(capsys):
    """Test that four bytes per value quadruple the memory figure."""
    assert cli.main(["analyze", "params", "--bytes-per-value", "4"]) == cli.EXIT_OK
    (record,) = _records(capsys.readouterr().out)
    assert record["activation_memory"] == 16 * 2**20


def test_profile_csv(capsys):
    """Test one CSV row per cube map and image, then the per-index means."""
    argv = ["analyze", "profile", "--synthetic", "2", "--synthetic-size", "48"]
    assert cli.main(argv) == cli.EXIT_OK
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == ["image", "index", "hr", "degraded", "gap", "relative_gap"]
    assert len(rows) == 1 + 3 * 64
    assert rows[1][:2] == ["synthetic-0", "1"]
    assert rows[65][:2] == ["synthetic-1", "1"]
    assert rows[-1][:2] == ["mean", "64"]
    values = np.array([[float(value) for value in row[2:]] for row in rows[1:]])
    per_image, mean = values[:128].reshape(2, 64, 4), values[128:]
    np.testing.assert_allclose(mean, per_image.mean(axis=0), rtol=1e-8)
    hr, degraded, gap, relative = per_image[0].T
    np.testing.assert_allclose(gap, np.abs(hr - degraded), rtol=1e-8, atol=1e-8)
    np.testing.assert_allclose(relative, gap / hr, rtol=1e-8)


def test_relative_gap_without_energy():
    """Test that indices without ground-truth energy report a zero relative gap."""
    gaps = cli.relative_gap(np.array([2.0, 0.0]), np.array([1.0, 0.5]))
    np.testing.assert_array_equal(gaps, [0.5, 0.0])


def test_bank_report(tmp_path, capsys, dct8):
    """Test the bank dump and its diagnostics."""
    path = str(tmp_path / "dct.bank")
    save_bank(path, dct8)
    assert cli.main(["analyze", "bank", "--bank", path]) == cli.EXIT_OK
    (record,) = _records(capsys.readouterr().out)
    assert record["off_diagonal_energy"] == pytest.approx(0, abs=1e-20)
    assert record["complexity_penalty"] == pytest.approx(0, abs=1e-20)
    assert len(record["variance_gap"]) == 64


@pytest.mark.parametrize("passed, code", [(True, cli.EXIT_OK), (False, cli.EXIT_FAILURE)])
def test_check_exit_code(mocker, capsys, passed, code):
    """Test that a failing check gives exit code 1."""
    mocker.patch.object(cli, "run_checks", return_value=[CheckResult("zigzag", passed, 0.0)])
    assert cli.main(["check"]) == code
    assert _records(capsys.readouterr().out)[0]["passed"] is passed


def test_check_invalid_stride():
    """Test that a stride not dividing the block size is a usage error."""
    assert cli.main(["check", "--strides", "3"]) == cli.EXIT_USAGE


def test_training_failure_exit_code(mocker):
    """Test that a diverging run gives exit code 1."""
    mocker.patch.object(cli, "train", side_effect=TrainingError("Non-finite loss"))
    argv = ["train", "--preset", "desk", "--synthetic", "1", "--synthetic-size", "48"]
    assert cli.main(argv) == cli.EXIT_FAILURE


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--preset", "desk"],  # no images
        ["train", "--synthetic", "1", "--scale", "5"],  # invalid config
        ["infer", "--ckpt", "missing.ckpt", "--in", "x.png", "--scale", "3", "--out", "y.png"],
    ],
)
def test_usage_errors(monkeypatch, tmp_path, argv):
    """Test that bad inputs give exit code 2."""
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == cli.EXIT_USAGE


def test_missing_command():
    """Test that argparse rejects a missing subcommand."""
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 2


def test_train_then_eval(tmp_path, capsys):
    """Test a short run and evaluation of its final checkpoint."""
    checkpoint_dir = str(tmp_path / "run")
    argv = [
        "train",
        "--preset",
        "desk",
        "--synthetic",
        "1",
        "--synthetic-size",
        "48",
        "--epochs",
        "1",
        "--max-steps",
        "1",
        "--dtype",
        "float64",
        "--checkpoint-dir",
        checkpoint_dir,
    ]
    assert cli.main(argv) == cli.EXIT_OK
    (summary,) = _records(capsys.readouterr().out)
    assert summary["steps"] == 2
    assert summary["checkpoint"] == os.path.join(checkpoint_dir, "final.ckpt")

    argv = ["eval", "--ckpt", summary["checkpoint"], "--scale", "3", "--synthetic", "2"]
    argv += ["--synthetic-size", "48"]
    assert cli.main(argv) == cli.EXIT_OK
    rows = _records(capsys.readouterr().out)
    assert [row["image"] for row in rows] == ["synthetic-10000", "synthetic-10001", "mean"]
    assert rows[-1]["crop"] == 3

    argv = ["eval", "--ckpt", summary["checkpoint"], "--scale", "2", "--synthetic", "1"]
    assert cli.main(argv) == cli.EXIT_USAGE


def test_infer_with_reference(tmp_path, capsys, identity_checkpoint):
    """Test that a reference image adds a quality report to the output record."""
    small = str(tmp_path / "small.png")
    reference = str(tmp_path / "reference.png")
    write_image(small, ColorImage(synthetic_image(10, 10, 3)))
    write_image(reference, ColorImage(synthetic_image(30, 30, 3)))
    out = str(tmp_path / "out.png")
    argv = ["infer", "--ckpt", identity_checkpoint, "--in", small, "--scale", "3", "--out", out]
    assert cli.main(argv + ["--reference", reference]) == cli.EXIT_OK
    (record,) = _records(capsys.readouterr().out)
    assert os.path.exists(out)
    assert record["quality"]["crop"] == 3
    assert record["padding"] == [0, 0]


def test_tsweep_report(capsys, identity_checkpoint, image_dir):
    """Test one record per checkpoint with its threshold and mean PSNR."""
    argv = ["analyze", "tsweep", "--ckpt", identity_checkpoint, identity_checkpoint]
    assert cli.main(argv + ["--scale", "3", "--hr-dir", image_dir]) == cli.EXIT_OK
    records = _records(capsys.readouterr().out)
    assert len(records) == 2
    assert records[0]["t"] == 3
    assert records[0]["psnr"] == pytest.approx(records[0]["bicubic_psnr"], abs=1e-6)


def test_bank_report_from_checkpoint(capsys, identity_checkpoint):
    """Test the bank dump of the filters stored in a checkpoint."""
    assert cli.main(["analyze", "bank", "--ckpt", identity_checkpoint]) == cli.EXIT_OK
    (record,) = _records(capsys.readouterr().out)
    assert record["bank"]["n"] == 4
    assert len(record["variance_gap"]) == 16


def test_profile_from_directory_and_bank(tmp_path, capsys, dct8, image_dir):
    """Test profiling image files with a bank read from disk."""
    path = str(tmp_path / "dct.bank")
    save_bank(path, dct8)
    argv = ["analyze", "profile", "--images", image_dir, "--bank", path]
    assert cli.main(argv) == cli.EXIT_OK
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert [row[0] for row in rows[1::64]] == ["0.png", "1.png", "mean"]


@pytest.mark.parametrize("value, expected", [("debug", "DEBUG"), ("bogus", "INFO")])
def test_log_level_from_environment(mocker, monkeypatch, value, expected):
    """Test that the log level is read from the environment."""
    basic_config = mocker.patch.object(cli.logging, "basicConfig")
    monkeypatch.setenv(cli.LOG_LEVEL_ENV, value)
    cli.setup_logging()
    assert basic_config.call_args.kwargs["level"] == getattr(cli.logging, expected)
