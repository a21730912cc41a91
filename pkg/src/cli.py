#!/usr/bin/env python3
# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.

"""Command line interface.

Commands: train, infer, eval, check and analyze (profile, params, bank, tsweep).
Machine-readable results go to stdout as line-delimited JSON (CSV for spectrum
profiles); logs go to stderr.

Exit codes: 0 success, 1 check or run failure, 2 usage or configuration error.
"""
import argparse
import csv
import json
import logging
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from cdct import CdctError, gram_matrix, off_diagonal_energy
from checks import run_checks
from config import PRESETS, VARIANTS, ConfigError, load_config
from container import ContainerError, bank_to_json, load_bank, load_checkpoint
from dataset import (
    DatasetError,
    build_training_pairs,
    crop_to_multiple,
    degrade,
    read_luma_directory,
    synthetic_corpus,
)
from imaging import ImagingError, spectrum_profile
from inference import InferenceError, InferenceRequest, evaluate, run_request
from network import (
    MAP_BYTES_PER_VALUE,
    VDSR_WEIGHTS,
    NetworkError,
    activation_memory,
    build_network,
    count_parameters,
)
from objective import complexity_penalty, reference_variances
from trainer import TrainingError, train
from transform import FilterBank, TransformError, bank_variances, dct_basis

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "CDCT_SR_LOG_LEVEL"
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

# Held-out synthetic images never overlap the training seeds.
HELD_OUT_SEED = 10000

USAGE_ERRORS = (
    ConfigError,
    ContainerError,
    DatasetError,
    ImagingError,
    InferenceError,
    CdctError,
    NetworkError,
    TransformError,
)


def setup_logging(debug: bool = False) -> None:
    """Configure root logger from the --debug flag or the environment."""
    level = "DEBUG" if debug else os.environ.get(LOG_LEVEL_ENV, "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def emit(record: Dict[str, Any]) -> None:
    """Print one JSON line to stdout."""
    print(json.dumps(record, sort_keys=True))


def _images(args: argparse.Namespace, seed: int = 0) -> List[Tuple[str, np.ndarray]]:
    directory = getattr(args, "images", None) or getattr(args, "hr_dir", None)
    if directory:
        return read_luma_directory(directory)
    if args.synthetic:
        corpus = synthetic_corpus(args.synthetic, args.synthetic_size, seed)
        return [(f"synthetic-{seed + i}", image) for i, image in enumerate(corpus)]
    raise DatasetError("No images given: use an image directory or --synthetic K.")


def cmd_train(args: argparse.Namespace) -> int:
    """Train a network and print a summary."""
    overrides = {
        "variant": args.variant,
        "scale": args.scale,
        "epochs": args.epochs,
        "max_steps": args.max_steps,
        "seed": args.seed,
        "dtype": args.dtype,
        "checkpoint_dir": args.checkpoint_dir,
        "train_fraction": args.train_fraction,
    }
    config = load_config(args.config, args.preset, overrides)
    images = [image for _, image in _images(args, config.seed)]
    pairs = build_training_pairs(images, config)
    result = train(config, pairs)
    last = result.history[-1]
    emit(
        {
            "checkpoint": result.checkpoints[-1],
            "steps": result.steps,
            "final_loss": {key: last.get(key) for key in ("mse", "total")},
            "config": config.render(),
        }
    )
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    """Super-resolve one image."""
    request = InferenceRequest(
        args.ckpt, args.input, args.scale, args.out, args.ensemble, args.reference
    )
    outcome = run_request(request)
    record = dict(outcome.metadata)
    if outcome.report is not None:
        record["quality"] = outcome.report.render()
    emit(record)
    return EXIT_OK


def _evaluate_checkpoint(
    path: str, images: List[Tuple[str, np.ndarray]], scale: int, ensemble: bool
) -> Tuple[Any, List[Dict[str, Any]]]:
    checkpoint = load_checkpoint(path)
    if checkpoint.config.scale != scale:
        raise InferenceError(
            f"Checkpoint {path} was trained for scale {checkpoint.config.scale}, not {scale}."
        )
    rows = [row.render() for row in evaluate(checkpoint.network, images, scale, ensemble)]
    return checkpoint, rows


def _mean(rows: Sequence[Dict[str, Any]], key: str) -> float:
    return float(np.mean([float(row[key]) for row in rows]))


def cmd_eval(args: argparse.Namespace) -> int:
    """Evaluate a checkpoint against ground-truth images and the bicubic baseline."""
    images = _images(args, HELD_OUT_SEED)
    _, rows = _evaluate_checkpoint(args.ckpt, images, args.scale, args.ensemble)
    for row in rows:
        emit(row)
    emit(
        {
            "image": "mean",
            "psnr": _mean(rows, "psnr"),
            "ssim": _mean(rows, "ssim"),
            "bicubic_psnr": _mean(rows, "bicubic_psnr"),
            "bicubic_ssim": _mean(rows, "bicubic_ssim"),
            "crop": args.scale,
        }
    )
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    """Run the oracle suite; exit 1 if any check fails."""
    results = run_checks(args.strides, args.seeds, args.block_size, args.bank, args.gradient_seeds)
    for result in results:
        emit(result.render())
    return EXIT_OK if all(result.passed for result in results) else EXIT_FAILURE


def relative_gap(hr_profile: np.ndarray, lr_profile: np.ndarray) -> np.ndarray:
    """Return |hr - lr| / hr per index, 0 where the ground truth has no energy."""
    gap = np.abs(hr_profile - lr_profile)
    safe = np.where(hr_profile > 0, hr_profile, 1.0)
    return np.where(hr_profile > 0, gap / safe, 0.0)


def cmd_profile(args: argparse.Namespace) -> int:
    """Write per-index spectrum profiles of ground truth and degraded images as CSV.

    Rows of every image are followed by rows named `mean` averaging each column over
    the images.
    """
    bank = load_bank(args.bank) if args.bank else dct_basis(args.block_size)
    writer = csv.writer(sys.stdout)
    writer.writerow(["image", "index", "hr", "degraded", "gap", "relative_gap"])
    tables: List[np.ndarray] = []
    for name, image in _images(args):
        hr_profile = spectrum_profile(crop_to_multiple(image, args.scale), bank, args.stride)
        lr_profile = spectrum_profile(degrade(image, args.scale), bank, args.stride)
        table = np.stack(
            [
                hr_profile,
                lr_profile,
                np.abs(hr_profile - lr_profile),
                relative_gap(hr_profile, lr_profile),
            ],
            axis=1,
        )
        tables.append(table)
        for index, row in enumerate(table, start=1):
            writer.writerow([name, index] + [f"{value:.10g}" for value in row])
    for index, row in enumerate(np.mean(tables, axis=0), start=1):
        writer.writerow(["mean", index] + [f"{value:.10g}" for value in row])
    return EXIT_OK


def cmd_params(args: argparse.Namespace) -> int:
    """Report parameter counts and activation memory of a configuration."""
    config = load_config(args.config, args.preset)
    net = build_network(config)
    count = count_parameters(net)
    emit(
        {
            "weights": count.weights,
            "biases": count.biases,
            "total": count.total,
            "vdsr_weights": VDSR_WEIGHTS,
            "vdsr_delta": VDSR_WEIGHTS - count.weights,
            "height": args.height,
            "width": args.width,
            "bytes_per_value": args.bytes_per_value,
            "activation_memory": activation_memory(
                net, args.height, args.width, args.bytes_per_value
            ),
        }
    )
    return EXIT_OK


def bank_report(bank: FilterBank) -> Dict[str, Any]:
    """Return bank values with its orthogonality and complexity order diagnostics."""
    variance_gap = bank_variances(bank.weights) - reference_variances(bank.n)
    return {
        "bank": json.loads(bank_to_json(bank)),
        "off_diagonal_energy": off_diagonal_energy(gram_matrix(bank)),
        "complexity_penalty": complexity_penalty(bank.weights),
        "variance_gap": variance_gap.tolist(),
    }


def cmd_bank(args: argparse.Namespace) -> int:
    """Dump a bank (from a bank file or a checkpoint) with diagnostics."""
    bank = load_bank(args.bank) if args.bank else load_checkpoint(args.ckpt).network.bank
    emit(bank_report(bank))
    return EXIT_OK


def cmd_tsweep(args: argparse.Namespace) -> int:
    """Report mean PSNR of every checkpoint against its threshold T."""
    images = _images(args, HELD_OUT_SEED)
    for path in args.ckpt:
        checkpoint, rows = _evaluate_checkpoint(path, images, args.scale, False)
        emit(
            {
                "checkpoint": path,
                "t": checkpoint.network.threshold,
                "psnr": _mean(rows, "psnr"),
                "bicubic_psnr": _mean(rows, "bicubic_psnr"),
            }
        )
    return EXIT_OK


def _add_image_source(parser: argparse.ArgumentParser, flag: str = "--images") -> None:
    parser.add_argument(flag, help="Directory of PNG / PGM images")
    parser.add_argument("--synthetic", type=int, default=0, help="Use K synthetic images")
    parser.add_argument("--synthetic-size", type=int, default=96, help="Synthetic image size")


def _add_config_source(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML configuration file")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="Configuration preset")


def build_parser() -> argparse.ArgumentParser:
    """Return parser of the whole command surface."""
    parser = argparse.ArgumentParser(prog="cdct-sr", description="DCT-domain super-resolution")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    train_cmd = commands.add_parser("train", help="Train a network")
    _add_config_source(train_cmd)
    _add_image_source(train_cmd)
    train_cmd.add_argument("--variant", choices=VARIANTS)
    train_cmd.add_argument("--scale", type=int)
    train_cmd.add_argument("--epochs", type=int)
    train_cmd.add_argument("--max-steps", type=int)
    train_cmd.add_argument("--seed", type=int)
    train_cmd.add_argument("--dtype", choices=("float32", "float64"))
    train_cmd.add_argument("--checkpoint-dir")
    train_cmd.add_argument("--train-fraction", type=float)
    train_cmd.set_defaults(func=cmd_train)

    infer_cmd = commands.add_parser("infer", help="Super-resolve an image")
    infer_cmd.add_argument("--ckpt", required=True, help="Checkpoint file")
    infer_cmd.add_argument("--in", dest="input", required=True, help="Input image")
    infer_cmd.add_argument("--scale", type=int, required=True)
    infer_cmd.add_argument("--out", required=True, help="Output image")
    infer_cmd.add_argument("--ensemble", action="store_true", help="Geometric self-ensemble")
    infer_cmd.add_argument("--reference", help="Ground-truth image for quality report")
    infer_cmd.set_defaults(func=cmd_infer)

    eval_cmd = commands.add_parser("eval", help="Evaluate a checkpoint")
    eval_cmd.add_argument("--ckpt", required=True)
    eval_cmd.add_argument("--scale", type=int, required=True)
    eval_cmd.add_argument("--ensemble", action="store_true")
    _add_image_source(eval_cmd, "--hr-dir")
    eval_cmd.set_defaults(func=cmd_eval)

    check_cmd = commands.add_parser("check", help="Run transform and gradient checks")
    check_cmd.add_argument("--strides", type=int, nargs="+", default=[2, 4, 8])
    check_cmd.add_argument("--seeds", type=int, default=5)
    check_cmd.add_argument("--block-size", type=int, default=8)
    check_cmd.add_argument("--gradient-seeds", type=int, default=2)
    check_cmd.add_argument("--bank", help="Bank file whose orthonormality is checked")
    check_cmd.set_defaults(func=cmd_check)

    analyze_cmd = commands.add_parser("analyze", help="Analysis reports")
    reports = analyze_cmd.add_subparsers(dest="report", required=True)

    profile_cmd = reports.add_parser("profile", help="Spectrum profile CSV")
    _add_image_source(profile_cmd)
    profile_cmd.add_argument("--scale", type=int, default=3)
    profile_cmd.add_argument("--stride", type=int, default=2)
    profile_cmd.add_argument("--block-size", type=int, default=8)
    profile_cmd.add_argument("--bank", help="Bank file (default: DCT basis)")
    profile_cmd.set_defaults(func=cmd_profile)

    params_cmd = reports.add_parser("params", help="Parameter and memory report")
    _add_config_source(params_cmd)
    params_cmd.add_argument("--height", type=int, default=512)
    params_cmd.add_argument("--width", type=int, default=512)
    params_cmd.add_argument("--bytes-per-value", type=int, default=MAP_BYTES_PER_VALUE)
    params_cmd.set_defaults(func=cmd_params)

    bank_cmd = reports.add_parser("bank", help="Filter bank dump")
    source = bank_cmd.add_mutually_exclusive_group(required=True)
    source.add_argument("--ckpt")
    source.add_argument("--bank")
    bank_cmd.set_defaults(func=cmd_bank)

    tsweep_cmd = reports.add_parser("tsweep", help="PSNR against threshold T")
    tsweep_cmd.add_argument("--ckpt", nargs="+", required=True)
    tsweep_cmd.add_argument("--scale", type=int, required=True)
    _add_image_source(tsweep_cmd, "--hr-dir")
    tsweep_cmd.set_defaults(func=cmd_tsweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run the command and return its exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.debug)
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except USAGE_ERRORS as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except TrainingError as exc:
        logger.error("Training failed: %s", exc)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: nocover
    sys.exit(main())
