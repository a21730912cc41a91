#!/usr/bin/env python3
# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.

"""Convolutional DCT layer.

Module focused on the transform layer of the network: strided forward convolution
that produces the DCT cube, the threshold split of the cube and the transpose
convolution that maps a cube back to an image. All convolutions use circular
boundary handling so that forward followed by inverse is exact for any
orthonormal filter bank.
"""
import logging
from typing import NamedTuple, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from transform import FilterBank, zigzag

logger = logging.getLogger(__name__)


class CdctError(Exception):
    """Indicates problem with transform layer arguments."""


class DctCube(NamedTuple):
    """Stack of N^2 frequency maps of one image, stored map-major."""

    maps: np.ndarray
    stride: int
    height: int
    width: int
    threshold: int = 0

    @property
    def n(self) -> int:
        """Return block size N of the bank that produced the cube."""
        return int(round(np.sqrt(self.maps.shape[0])))

    @property
    def map_shape(self) -> Tuple[int, int]:
        """Return (H / S, W / S)."""
        return int(self.maps.shape[1]), int(self.maps.shape[2])


class CubeSplit(NamedTuple):
    """Low (1..T) and high (T+1..N^2) parts of a DCT cube."""

    low: np.ndarray
    high: np.ndarray


def validate_geometry(n: int, stride: int, height: int, width: int) -> None:
    """Check that stride and image size are usable with N x N filters.

    :raises:
        CdctError: if the stride does not divide N or the image cannot hold a filter
            or is not tiled by the stride.
    """
    if stride < 1 or n % stride:
        raise CdctError(f"Stride {stride} does not divide block size {n}.")
    if height < n or width < n:
        raise CdctError(f"Image {height}x{width} is smaller than the {n}x{n} filters.")
    if height % stride or width % stride:
        raise CdctError(f"Image {height}x{width} is not a multiple of stride {stride}.")


def image_windows(images: np.ndarray, n: int, stride: int) -> np.ndarray:
    """Return circular N x N windows at every stride-S origin.

    :param images: array of shape (..., H, W)
    :return: read-only view of shape (..., H / S, W / S, N, N)
    """
    pad = n - stride
    widths = [(0, 0)] * (images.ndim - 2) + [(0, pad), (0, pad)]
    padded = np.pad(images, widths, mode="wrap")
    windows = sliding_window_view(padded, (n, n), axis=(-2, -1))
    return windows[..., ::stride, ::stride, :, :]


def correlate(images: np.ndarray, weights: np.ndarray, stride: int) -> np.ndarray:
    """Strided circular cross-correlation of images with every filter.

    :param images: array of shape (..., H, W)
    :param weights: array of shape (M, N, N)
    :return: maps of shape (..., M, H / S, W / S)
    """
    windows = image_windows(images, weights.shape[-1], stride)
    maps = np.tensordot(windows, weights, axes=([-2, -1], [1, 2]))
    return np.moveaxis(maps, -1, -3)


def transpose_correlate(maps: np.ndarray, weights: np.ndarray, stride: int) -> np.ndarray:
    """Adjoint of :func:`correlate` (unweighted transpose convolution, overlap-add).

    :param maps: array of shape (..., M, P, Q)
    :param weights: array of shape (M, N, N)
    :return: images of shape (..., P * S, Q * S)
    """
    n = weights.shape[-1]
    ratio = n // stride
    rows, cols = maps.shape[-2:]
    patches = np.tensordot(np.moveaxis(maps, -3, -1), weights, axes=([-1], [0]))
    patches = patches.reshape(patches.shape[:-2] + (ratio, stride, ratio, stride))
    acc = np.zeros(patches.shape[:-4] + (stride, stride), dtype=patches.dtype)
    # Sub-block (u, v) of the patch anchored at block (p, q) lands on block (p + u, q + v).
    for u in range(ratio):
        for v in range(ratio):
            acc += np.roll(patches[..., u, :, v, :], shift=(u, v), axis=(-4, -3))
    acc = np.swapaxes(acc, -3, -2)
    return acc.reshape(acc.shape[:-4] + (rows * stride, cols * stride))


def window_products(images: np.ndarray, maps: np.ndarray, n: int, stride: int) -> np.ndarray:
    """Return sum over windows of map[i, p, q] * window[p, q], one N x N array per map.

    This is the derivative of <maps, correlate(images, w)> with respect to w, and
    the shared kernel of both filter-gradient paths. Leading (batch) axes are summed.

    :param images: array of shape (..., H, W)
    :param maps: array of shape (..., M, H / S, W / S)
    :return: array of shape (M, N, N)
    """
    windows = image_windows(images, n, stride)
    lead = images.ndim - 2
    axes_maps = list(range(lead)) + [lead + 1, lead + 2]
    axes_windows = list(range(lead)) + [lead, lead + 1]
    return np.tensordot(maps, windows, axes=(axes_maps, axes_windows))


def overlap_weight(n: int, stride: int) -> float:
    """Return the 1 / (N / S)^2 overlap reweighting of the inverse transform."""
    return 1.0 / (n // stride) ** 2


def cdct_forward(image: np.ndarray, bank: FilterBank, stride: int) -> DctCube:
    """Produce the DCT cube of a luminance image.

    Each map f_i is the circular stride-S cross-correlation of the image with
    filter w_i; no filter flip is applied.

    :raises:
        CdctError: if the stride does not divide N or the image is too small.
    """
    image = np.asarray(image)
    height, width = image.shape
    validate_geometry(bank.n, stride, height, width)
    return DctCube(correlate(image, bank.weights, stride), stride, height, width)


def cdct_transpose(cube: DctCube, bank: FilterBank) -> np.ndarray:
    """Return the unweighted transpose convolution of a cube (adjoint of the forward pass)."""
    _check_cube(cube, bank)
    return transpose_correlate(cube.maps, bank.weights, cube.stride)


def cdct_inverse(cube: DctCube, bank: FilterBank) -> np.ndarray:
    """Reconstruct an image from a DCT cube.

    The maps are zero-upsampled by S and reweighted by 1 / (N / S)^2 before the
    transpose convolution, which cancels the N / S overlap in each direction.

    :raises:
        CdctError: if cube and bank dimensions disagree.
    """
    return cdct_transpose(cube, bank) * overlap_weight(bank.n, cube.stride)


def _check_cube(cube: DctCube, bank: FilterBank) -> None:
    if cube.maps.ndim != 3 or cube.maps.shape[0] != len(bank):
        raise CdctError(
            f"Cube with maps of shape {cube.maps.shape} does not match a bank of "
            f"{len(bank)} filters."
        )
    validate_geometry(bank.n, cube.stride, cube.height, cube.width)
    expected = (cube.height // cube.stride, cube.width // cube.stride)
    if cube.map_shape != expected:
        raise CdctError(f"Cube maps are {cube.map_shape}, expected {expected}.")


def block_dct_oracle(image: np.ndarray, stride: int, n: int = 8) -> DctCube:
    """Compute the DCT cube by direct block-DCT summation.

    Every stride-S block origin (circularly extended) is transformed with the
    double sum over pixels of the cosine products, evaluated here from the
    definition rather than taken from the filter bank, and the coefficients are
    reindexed in zig-zag order. Intentionally naive; used only to verify
    :func:`cdct_forward`.
    """
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape
    validate_geometry(n, stride, height, width)
    pixel = np.arange(n)
    table = np.empty((n * n, n, n))
    for i, (k1, k2) in enumerate(zigzag(n)):
        scale = np.sqrt((1.0 if k1 == 0 else 2.0) / n) * np.sqrt((1.0 if k2 == 0 else 2.0) / n)
        rows = np.cos(np.pi / n * (pixel + 0.5) * k1)
        cols = np.cos(np.pi / n * (pixel + 0.5) * k2)
        table[i] = scale * rows[:, None] * cols[None, :]
    maps = np.zeros((n * n, height // stride, width // stride))
    extended = np.pad(image, ((0, n), (0, n)), mode="wrap")
    for p in range(height // stride):
        for q in range(width // stride):
            block = extended[p * stride : p * stride + n, q * stride : q * stride + n]
            maps[:, p, q] = np.sum(table * block, axis=(1, 2))
    return DctCube(maps, stride, height, width)


def split_cube(cube: DctCube, t: int) -> CubeSplit:
    """Split a cube into maps 1..t (low) and t+1..N^2 (high).

    :raises:
        CdctError: if t is outside [0, N^2].
    """
    total = cube.maps.shape[0]
    if not 0 <= t <= total:
        raise CdctError(f"Threshold {t} outside of [0, {total}].")
    return CubeSplit(cube.maps[:t], cube.maps[t:])


def merge_cube(split: CubeSplit, like: DctCube) -> DctCube:
    """Concatenate a split back into a cube carrying the geometry of `like`."""
    maps = np.concatenate([split.low, split.high], axis=0)
    return like._replace(maps=maps, threshold=split.low.shape[0])


def gram_matrix(bank: FilterBank) -> np.ndarray:
    """Return G[i][j] = vec(w_i)^T vec(w_j)."""
    vectors = bank.vectors()
    return vectors @ vectors.T


def off_diagonal_energy(gram: np.ndarray) -> float:
    """Return sum of squared off-diagonal Gram entries."""
    return float(np.sum(gram**2) - np.sum(np.diag(gram) ** 2))
