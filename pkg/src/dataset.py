#!/usr/bin/env python3
# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.

"""Training data pipeline.

Module focused on turning ground-truth luminance images into co-located
(degraded, ground truth) patch pairs: geometric augmentation, bicubic
degradation, overlapping patch extraction and a seeded synthetic corpus used
when no image directory is available.
"""
import glob
import logging
import math
import os
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np
from scipy import ndimage

from config import TrainConfig
from imaging import ImagingError, bicubic_resize, read_image, sample_bicubic
from network import make_rng

logger = logging.getLogger(__name__)

AUGMENT_ANGLES = (45, 90, 135, 180, 225, 270, 315)
AUGMENT_SCALES = (0.7, 0.8, 0.9)
IMAGE_PATTERNS = ("*.png", "*.pgm")


class DatasetError(Exception):
    """Indicates problem with training images or patch extraction."""


class PatchPair(NamedTuple):
    """Co-located degraded and ground-truth patches."""

    lr_patch: np.ndarray
    hr_patch: np.ndarray


def inscribed_size(height: int, width: int, angle: float) -> Tuple[int, int]:
    """Return largest axis-aligned (height, width) fully inside a rotated rectangle.

    :param angle: rotation in radians
    """
    sin_a, cos_a = abs(math.sin(angle)), abs(math.cos(angle))
    long_side, short_side = max(height, width), min(height, width)
    if short_side <= 2 * sin_a * cos_a * long_side or abs(sin_a - cos_a) < 1e-10:
        half = 0.5 * short_side
        if width >= height:
            out_w, out_h = half / sin_a, half / cos_a
        else:
            out_w, out_h = half / cos_a, half / sin_a
    else:
        cos_2a = cos_a * cos_a - sin_a * sin_a
        out_w = (width * cos_a - height * sin_a) / cos_2a
        out_h = (height * cos_a - width * sin_a) / cos_2a
    # one pixel margin keeps every sample strictly inside the source
    return max(int(math.floor(out_h)) - 1, 1), max(int(math.floor(out_w)) - 1, 1)


def rotate(image: np.ndarray, degrees: int) -> np.ndarray:
    """Rotate image clockwise by a multiple of 45 degrees.

    Quarter turns are exact. Odd multiples of 45 degrees are resampled with the
    bicubic kernel about the image centre and cropped to the largest rectangle
    containing only valid pixels.

    :raises:
        DatasetError: if the angle is not a multiple of 45 degrees.
    """
    if degrees % 45:
        raise DatasetError(f"Rotation angle {degrees} is not a multiple of 45 degrees.")
    image = np.rot90(image, k=-((degrees // 90) % 4))
    if degrees % 90 == 0:
        return np.ascontiguousarray(image)

    angle = math.radians(45)
    height, width = image.shape
    out_h, out_w = inscribed_size(height, width, angle)
    rows, cols = np.meshgrid(
        np.arange(out_h) - (out_h - 1) / 2, np.arange(out_w) - (out_w - 1) / 2, indexing="ij"
    )
    src_rows = (height - 1) / 2 + math.cos(angle) * rows - math.sin(angle) * cols
    src_cols = (width - 1) / 2 + math.sin(angle) * rows + math.cos(angle) * cols
    return sample_bicubic(image, src_rows, src_cols)


def augment(image: np.ndarray) -> List[np.ndarray]:
    """Return identity, 7 rotations, horizontal and vertical flip and 3 rescales."""
    image = np.asarray(image, dtype=np.float64)
    variants = [image]
    variants += [rotate(image, angle) for angle in AUGMENT_ANGLES]
    variants += [np.fliplr(image).copy(), np.flipud(image).copy()]
    variants += [bicubic_resize(image, factor=factor) for factor in AUGMENT_SCALES]
    return variants


def crop_to_multiple(image: np.ndarray, scale: int) -> np.ndarray:
    """Crop bottom/right so that both dimensions are multiples of scale."""
    height, width = image.shape
    return image[: height - height % scale, : width - width % scale]


def degrade(hr: np.ndarray, scale: int) -> np.ndarray:
    """Return bicubic down- then up-sampled image with the dimensions of the cropped input.

    :raises:
        DatasetError: if the image is smaller than the scale factor.
    """
    hr = crop_to_multiple(np.asarray(hr, dtype=np.float64), scale)
    height, width = hr.shape
    if height < scale or width < scale:
        raise DatasetError(f"Image {hr.shape} is too small for scale {scale}.")
    lr = bicubic_resize(hr, size=(height // scale, width // scale))
    return np.clip(bicubic_resize(lr, size=(height, width)), 0.0, 1.0)


def patch_anchors(length: int, size: int, overlap: int) -> List[int]:
    """Return patch start positions along one axis; the last one is pinned to the edge."""
    anchors = list(range(0, length - size + 1, size - overlap))
    if anchors and anchors[-1] != length - size:
        anchors.append(length - size)
    return anchors


def extract_patches(
    lr: np.ndarray, hr: np.ndarray, size: int = 40, overlap: int = 10
) -> List[PatchPair]:
    """Cut co-located size x size patches with the given overlap, row-major order.

    :raises:
        DatasetError: if the two images differ in shape or overlap >= size.
    """
    if np.shape(lr) != np.shape(hr):
        raise DatasetError(f"Image dimensions differ: {np.shape(lr)} vs {np.shape(hr)}.")
    if overlap >= size:
        raise DatasetError(f"Overlap {overlap} must be smaller than patch size {size}.")
    height, width = np.shape(hr)
    if height < size or width < size:
        logger.warning("Image %dx%d is smaller than patch size %d, skipped.", height, width, size)
        return []
    return [
        PatchPair(lr[r : r + size, c : c + size], hr[r : r + size, c : c + size])
        for r in patch_anchors(height, size, overlap)
        for c in patch_anchors(width, size, overlap)
    ]


def synthetic_image(height: int, width: int, seed: int, texture: float = 0.05) -> np.ndarray:
    """Return seeded piecewise-smooth image with blurred edges and fine texture, in [0, 1]."""
    rng = make_rng(seed)
    rows, cols = np.meshgrid(
        np.linspace(0, 1, height), np.linspace(0, 1, width), indexing="ij"
    )
    image = 0.3 + 0.4 * (rng.uniform(-0.5, 0.5) * rows + rng.uniform(-0.5, 0.5) * cols)
    for _ in range(int(rng.integers(6, 12))):
        centre_r, centre_c = rng.uniform(0, 1, size=2)
        radius_r, radius_c = rng.uniform(0.05, 0.35, size=2)
        level = rng.uniform(-0.4, 0.4)
        if rng.uniform() < 0.5:
            mask = ((rows - centre_r) / radius_r) ** 2 + ((cols - centre_c) / radius_c) ** 2 <= 1
        else:
            mask = (np.abs(rows - centre_r) <= radius_r) & (np.abs(cols - centre_c) <= radius_c)
        image = np.where(mask, image + level, image)
    image = ndimage.gaussian_filter(image, sigma=1.0, mode="reflect")
    if texture > 0:
        noise = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma=0.7)
        image = image + texture * noise / max(float(np.std(noise)), 1e-12)
    return np.clip(image, 0.0, 1.0)


def synthetic_corpus(count: int, size: int = 96, seed: int = 0) -> List[np.ndarray]:
    """Return `count` synthetic images of size x size with consecutive seeds."""
    return [synthetic_image(size, size, seed + index) for index in range(count)]


def read_luma_directory(directory: str) -> List[Tuple[str, np.ndarray]]:
    """Return (file name, luminance plane) of every PNG / PGM image in a directory, sorted.

    :raises:
        DatasetError: if the directory holds no readable image.
    """
    paths = sorted(
        path for pattern in IMAGE_PATTERNS for path in glob.glob(os.path.join(directory, pattern))
    )
    if not paths:
        raise DatasetError(f"No PNG or PGM images found in {directory}.")
    try:
        return [(os.path.basename(path), read_image(path).y) for path in paths]
    except ImagingError as exc:
        raise DatasetError(str(exc)) from exc


def select_subset(count: int, fraction: float, seed: int) -> List[int]:
    """Return sorted seeded subset of round(count * fraction) indices (at least one)."""
    if fraction >= 1:
        return list(range(count))
    keep = max(1, int(round(count * fraction)))
    return sorted(int(i) for i in make_rng(seed).choice(count, size=keep, replace=False))


def build_training_pairs(images: Sequence[np.ndarray], config: TrainConfig) -> List[PatchPair]:
    """Augment, degrade and cut images into the patch list used for training.

    :raises:
        DatasetError: if no image is given or no patch could be extracted.
    """
    if not images:
        raise DatasetError("Training dataset is empty.")
    selected = select_subset(len(images), config.train_fraction, config.seed)
    logger.info("Using %d of %d training images.", len(selected), len(images))

    pairs: List[PatchPair] = []
    for index in selected:
        variants = augment(images[index]) if config.augment else [images[index]]
        for variant in variants:
            hr = np.clip(crop_to_multiple(variant, config.scale), 0.0, 1.0)
            if min(hr.shape) < config.scale:
                continue
            lr = degrade(hr, config.scale)
            pairs += extract_patches(lr, hr, config.patch_size, config.patch_overlap)
    if not pairs:
        raise DatasetError(
            f"No {config.patch_size}x{config.patch_size} patches could be extracted."
        )
    logger.info("Extracted %d patch pairs.", len(pairs))
    return pairs


def stack_batch(pairs: Sequence[PatchPair], indices: Sequence[int]) -> Tuple[np.ndarray, ...]:
    """Return (degraded, ground truth) arrays of shape (B, size, size) for the indices."""
    lr = np.stack([pairs[i].lr_patch for i in indices])
    hr = np.stack([pairs[i].hr_patch for i in indices])
    return lr, hr
