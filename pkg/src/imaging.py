#!/usr/bin/env python3
# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.

"""Image helpers.

Module focused on image I/O, YCbCr handling (only luminance is super-resolved),
the deterministic bicubic resampler and image quality metrics.
"""
import logging
import math
from typing import NamedTuple, Optional, Tuple

import numpy as np
from PIL import Image
from skimage.metrics import structural_similarity

from cdct import cdct_forward
from transform import FilterBank

logger = logging.getLogger(__name__)

KEYS_A = -0.5
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class ImagingError(Exception):
    """Indicates problem with image data or image files."""


class ColorImage(NamedTuple):
    """Image as Y, Cb, Cr planes in [0, 1]; chroma planes are None for grayscale."""

    y: np.ndarray
    cb: Optional[np.ndarray] = None
    cr: Optional[np.ndarray] = None

    @property
    def is_gray(self) -> bool:
        """Return True if the image has only the luminance plane."""
        return self.cb is None


class QualityReport(NamedTuple):
    """Quality of a restored image against the ground truth."""

    psnr: float
    ssim: float
    crop: int

    def render(self) -> dict:
        """Return JSON-friendly dict; infinite PSNR is rendered as the string 'inf'."""
        return {
            "psnr": self.psnr if math.isfinite(self.psnr) else "inf",
            "ssim": self.ssim,
            "crop": self.crop,
        }


def keys_kernel(x: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    """Evaluate the Keys cubic convolution kernel."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    near = (a + 2) * ax**3 - (a + 3) * ax**2 + 1
    far = a * ax**3 - 5 * a * ax**2 + 8 * a * ax - 4 * a
    return np.where(ax <= 1, near, np.where(ax < 2, far, 0.0))


def resize_matrix(in_length: int, out_length: int, antialias: bool = True) -> np.ndarray:
    """Return (out_length, in_length) matrix of bicubic weights along one axis.

    Sample centres are aligned, indices outside the signal are clamped to the edge
    and, when shrinking with antialiasing, the kernel is stretched by the inverse
    scale. Each row sums to 1.
    """
    scale = out_length / in_length
    kernel_scale = min(scale, 1.0) if antialias else 1.0
    source = (np.arange(out_length) + 0.5) / scale - 0.5
    support = 4.0 / kernel_scale
    taps = int(math.ceil(support)) + 2
    first = np.floor(source - support / 2).astype(int)
    indices = first[:, None] + np.arange(taps)[None, :]
    weights = kernel_scale * keys_kernel((source[:, None] - indices) * kernel_scale)
    weights /= weights.sum(axis=1, keepdims=True)
    matrix = np.zeros((out_length, in_length))
    rows = np.repeat(np.arange(out_length), taps)
    np.add.at(matrix, (rows, np.clip(indices, 0, in_length - 1).ravel()), weights.ravel())
    return matrix


def bicubic_resize(
    image: np.ndarray,
    factor: Optional[float] = None,
    size: Optional[Tuple[int, int]] = None,
    antialias: bool = True,
) -> np.ndarray:
    """Resize a 2D plane with the separable Keys (a = -0.5) kernel.

    :param factor: scale factor applied to both axes (ignored if size is given)
    :param size: target (height, width)
    :raises:
        ImagingError: if neither or a degenerate target is requested.
    """
    image = np.asarray(image, dtype=np.float64)
    height, width = image.shape
    if size is None:
        if factor is None or factor <= 0:
            raise ImagingError(f"Resize factor must be positive, got {factor}.")
        size = (int(round(height * factor)), int(round(width * factor)))
    if size[0] < 1 or size[1] < 1:
        raise ImagingError(f"Degenerate target size {size}.")
    rows = resize_matrix(height, size[0], antialias)
    cols = resize_matrix(width, size[1], antialias)
    return rows @ image @ cols.T


def sample_bicubic(image: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Sample a plane at fractional coordinates with the Keys kernel, edge clamped."""
    height, width = image.shape
    taps = np.arange(-1, 3)
    row0 = np.floor(rows).astype(int)
    col0 = np.floor(cols).astype(int)
    row_weights = keys_kernel((rows - row0)[..., None] - taps)
    col_weights = keys_kernel((cols - col0)[..., None] - taps)
    row_index = np.clip(row0[..., None] + taps, 0, height - 1)
    col_index = np.clip(col0[..., None] + taps, 0, width - 1)
    values = image[row_index[..., :, None], col_index[..., None, :]]
    return np.einsum("...i,...j,...ij->...", row_weights, col_weights, values)


def rgb_to_ycbcr(rgb: np.ndarray) -> ColorImage:
    """Convert (H, W, 3) RGB in [0, 1] to BT.601 full-range YCbCr planes."""
    rgb = np.asarray(rgb, dtype=np.float64)
    red, green, blue = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    luma = 0.299 * red + 0.587 * green + 0.114 * blue
    return ColorImage(luma, 0.5 + (blue - luma) / 1.772, 0.5 + (red - luma) / 1.402)


def ycbcr_to_rgb(image: ColorImage) -> np.ndarray:
    """Convert YCbCr planes back to (H, W, 3) RGB.

    :raises:
        ImagingError: if the image has no chroma planes.
    """
    if image.cb is None or image.cr is None:
        raise ImagingError("Grayscale image has no chroma planes to convert.")
    red = image.y + 1.402 * (image.cr - 0.5)
    blue = image.y + 1.772 * (image.cb - 0.5)
    green = (image.y - 0.299 * red - 0.114 * blue) / 0.587
    return np.stack([red, green, blue], axis=-1)


def read_image(path: str) -> ColorImage:
    """Read PNG (8/16-bit) or PGM image into [0, 1] planes.

    :raises:
        ImagingError: if the file cannot be read.
    """
    try:
        with Image.open(path) as img:
            if img.mode in ("I;16", "I;16B", "I;16L", "I"):
                return ColorImage(np.asarray(img, dtype=np.float64) / 65535.0)
            if img.mode in ("L", "1"):
                return ColorImage(np.asarray(img.convert("L"), dtype=np.float64) / 255.0)
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise ImagingError(f"Failed to read image {path}: {exc}") from exc
    return rgb_to_ycbcr(rgb)


def write_image(path: str, image: ColorImage, bits: int = 8) -> None:
    """Write image as 8-bit (gray or RGB) or 16-bit (gray) file; format follows extension.

    :raises:
        ImagingError: if the image cannot be written.
    """
    if bits not in (8, 16):
        raise ImagingError(f"Unsupported bit depth {bits}.")
    if image.is_gray:
        plane = np.clip(image.y, 0.0, 1.0)
        if bits == 16:
            data = Image.fromarray(np.round(plane * 65535).astype(np.uint16))
        else:
            data = Image.fromarray(np.round(plane * 255).astype(np.uint8), mode="L")
    else:
        rgb = np.clip(ycbcr_to_rgb(image), 0.0, 1.0)
        data = Image.fromarray(np.round(rgb * 255).astype(np.uint8), mode="RGB")
    try:
        data.save(path)
    except (OSError, ValueError) as exc:
        raise ImagingError(f"Failed to write image {path}: {exc}") from exc


def _cropped_pair(a: np.ndarray, b: np.ndarray, crop: int) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ImagingError(f"Image dimensions differ: {a.shape} vs {b.shape}.")
    if crop > 0:
        a = a[crop:-crop, crop:-crop]
        b = b[crop:-crop, crop:-crop]
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, border_crop: int = 0) -> float:
    """Return PSNR in dB for [0, 1] images after cropping border_crop pixels per side.

    Identical images yield math.inf.

    :raises:
        ImagingError: on dimension mismatch.
    """
    a, b = _cropped_pair(a, b, border_crop)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(1.0 / mse)


def ssim(a: np.ndarray, b: np.ndarray, border_crop: int = 0) -> float:
    """Return mean SSIM (11x11 Gaussian window, sigma 1.5, K1 0.01, K2 0.03, range 1).

    :raises:
        ImagingError: on dimension mismatch or images smaller than the window.
    """
    a, b = _cropped_pair(a, b, border_crop)
    if min(a.shape) < SSIM_WINDOW:
        raise ImagingError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}.")
    # sigma 1.5 with the default truncation gives the 11x11 window
    return float(
        structural_similarity(
            a,
            b,
            data_range=1.0,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            K1=SSIM_K1,
            K2=SSIM_K2,
        )
    )


def assess(restored: np.ndarray, reference: np.ndarray, crop: int = 0) -> QualityReport:
    """Return PSNR and SSIM of a restored luminance plane against the reference."""
    return QualityReport(
        psnr(restored, reference, crop), ssim(restored, reference, crop), crop
    )


def spectrum_profile(image: np.ndarray, bank: FilterBank, stride: int) -> np.ndarray:
    """Return mean absolute coefficient of every DCT cube map.

    The image is cropped to a multiple of the stride first.
    """
    image = np.asarray(image, dtype=np.float64)
    height = image.shape[0] - image.shape[0] % stride
    width = image.shape[1] - image.shape[1] % stride
    cube = cdct_forward(image[:height, :width], bank, stride)
    return np.mean(np.abs(cube.maps), axis=(1, 2))
