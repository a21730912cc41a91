#!/usr/bin/env python3
# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.

"""Super-resolution of single images with a trained network.

Only the luminance plane goes through the network: bicubic enlargement,
forward transform, threshold split, CNN correction of the high maps, merge and
inverse transform. Chrominance planes are bicubic-enlarged.
"""
import logging
from typing import Any, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from cdct import CubeSplit, cdct_forward, cdct_inverse, merge_cube, split_cube
from container import load_checkpoint
from imaging import (
    ColorImage,
    QualityReport,
    assess,
    bicubic_resize,
    read_image,
    write_image,
)
from network import Network, cnn_forward

logger = logging.getLogger(__name__)

ENSEMBLE_SIZE = 8


class InferenceError(Exception):
    """Indicates problem with an inference request."""


class InferenceRequest(NamedTuple):
    """Single image super-resolution job."""

    checkpoint: str
    input_path: str
    scale: int
    output_path: str
    self_ensemble: bool = False
    reference_path: Optional[str] = None


class InferenceOutcome(NamedTuple):
    """Result of a job: restored image, optional quality report and metadata."""

    image: ColorImage
    report: Optional[QualityReport]
    metadata: Dict[str, Any]


class EvaluationRow(NamedTuple):
    """Quality of the network output and of the bicubic baseline for one image."""

    name: str
    restored: QualityReport
    bicubic: QualityReport

    def render(self) -> Dict[str, Any]:
        """Return JSON-friendly dict."""
        return {
            "image": self.name,
            "psnr": self.restored.render()["psnr"],
            "ssim": self.restored.ssim,
            "bicubic_psnr": self.bicubic.render()["psnr"],
            "bicubic_ssim": self.bicubic.ssim,
            "crop": self.restored.crop,
        }


def padding_for(shape: Tuple[int, int], n: int, stride: int) -> Tuple[int, int]:
    """Return bottom/right padding making dims multiples of the stride and at least n."""
    pads = []
    for length in shape:
        target = max(length, n)
        target += -target % stride
        pads.append(target - length)
    return pads[0], pads[1]


def restore_luma(net: Network, luma: np.ndarray) -> np.ndarray:
    """Run transform, split, CNN, merge and inverse transform on an enlarged luminance plane.

    Planes whose size is not usable with the stride are reflect-padded and the
    output is cropped back.
    """
    luma = np.asarray(luma, dtype=net.dtype)
    height, width = luma.shape
    pad_h, pad_w = padding_for((height, width), net.bank.n, net.stride)
    if pad_h or pad_w:
        logger.warning("Padding %dx%d input by (%d, %d) pixels.", height, width, pad_h, pad_w)
        mode = "reflect" if pad_h < height and pad_w < width else "symmetric"
        luma = np.pad(luma, ((0, pad_h), (0, pad_w)), mode=mode)

    cube = cdct_forward(luma, net.bank, net.stride)
    split = split_cube(cube, net.threshold)
    high = cnn_forward(split, net)
    restored = merge_cube(CubeSplit(split.low, high), cube)
    return cdct_inverse(restored, net.bank)[:height, :width]


def self_ensemble(net: Network, luma: np.ndarray) -> np.ndarray:
    """Average restorations over 4 rotations with and without vertical flip."""
    outputs = []
    for quarter in range(4):
        for flip in (False, True):
            variant = np.rot90(luma, k=quarter)
            if flip:
                variant = np.flipud(variant)
            output = restore_luma(net, np.ascontiguousarray(variant))
            if flip:
                output = np.flipud(output)
            outputs.append(np.rot90(output, k=-quarter))
    return np.sum(outputs, axis=0) / ENSEMBLE_SIZE


def super_resolve(
    net: Network,
    image: ColorImage,
    scale: int,
    ensemble: bool = False,
    trained_scale: Optional[int] = None,
) -> ColorImage:
    """Enlarge an image by `scale`.

    :param trained_scale: scale factor the network was trained for, if known
    :raises:
        InferenceError: if the requested scale differs from the trained one.
    """
    if trained_scale is not None and trained_scale != scale:
        raise InferenceError(f"Network was trained for scale {trained_scale}, not {scale}.")
    enlarged = bicubic_resize(image.y, factor=scale)
    luma = self_ensemble(net, enlarged) if ensemble else restore_luma(net, enlarged)
    luma = np.clip(luma.astype(np.float64), 0.0, 1.0)
    if image.is_gray:
        return ColorImage(luma)
    return ColorImage(
        luma,
        bicubic_resize(image.cb, size=luma.shape),
        bicubic_resize(image.cr, size=luma.shape),
    )


def degrade_for_evaluation(hr: np.ndarray, scale: int) -> Tuple[np.ndarray, np.ndarray]:
    """Return (cropped ground truth, bicubic-downsampled input) for evaluation."""
    height, width = hr.shape
    cropped = hr[: height - height % scale, : width - width % scale]
    low = bicubic_resize(cropped, size=(cropped.shape[0] // scale, cropped.shape[1] // scale))
    return cropped, low


def evaluate_image(
    net: Network, name: str, hr: np.ndarray, scale: int, ensemble: bool = False
) -> EvaluationRow:
    """Compare network output and bicubic baseline with ground truth, cropping `scale` pixels."""
    cropped, low = degrade_for_evaluation(hr, scale)
    restored = super_resolve(net, ColorImage(low), scale, ensemble).y
    bicubic = np.clip(bicubic_resize(low, size=cropped.shape), 0.0, 1.0)
    return EvaluationRow(
        name, assess(restored, cropped, scale), assess(bicubic, cropped, scale)
    )


def evaluate(
    net: Network, images: List[Tuple[str, np.ndarray]], scale: int, ensemble: bool = False
) -> List[EvaluationRow]:
    """Evaluate every (name, ground truth luminance) pair."""
    return [evaluate_image(net, name, hr, scale, ensemble) for name, hr in images]


def run_request(request: InferenceRequest) -> InferenceOutcome:
    """Execute an inference request and write the output image.

    :raises:
        InferenceError: on scale mismatch or unusable reference image.
    """
    checkpoint = load_checkpoint(request.checkpoint)
    image = read_image(request.input_path)
    result = super_resolve(
        checkpoint.network,
        image,
        request.scale,
        request.self_ensemble,
        trained_scale=checkpoint.config.scale,
    )
    write_image(request.output_path, result)
    enlarged_shape = result.y.shape
    metadata = {
        "input": request.input_path,
        "output": request.output_path,
        "scale": request.scale,
        "self_ensemble": request.self_ensemble,
        "padding": list(
            padding_for(enlarged_shape, checkpoint.network.bank.n, checkpoint.network.stride)
        ),
        "config": checkpoint.config.render(),
    }
    report = None
    if request.reference_path:
        reference = read_image(request.reference_path).y
        if reference.shape != enlarged_shape:
            raise InferenceError(
                f"Reference {reference.shape} does not match output {enlarged_shape}."
            )
        report = assess(result.y, reference, request.scale)
    return InferenceOutcome(result, report, metadata)
