#!/usr/bin/env python3
# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.

"""Residual CNN on top of the transform layer.

Module focused on the dense-tensor side of the network: same-padded convolution
layers with ReLU, Xavier initialization, the residual mapping of the high
frequency part of the DCT cube and parameter / memory accounting. Tensors are
plain numpy arrays laid out (batch, channel, row, column).
"""
import copy
import enum
import logging
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from cdct import (
    CdctError,
    CubeSplit,
    correlate,
    overlap_weight,
    transpose_correlate,
    validate_geometry,
)
from config import TrainConfig
from transform import FilterBank, FilterTag, dct_basis

logger = logging.getLogger(__name__)

# Weights of a 20-layer 3x3, 64-channel plain network used for the comparison of
# parameter counts: two single-channel end layers and eighteen 64x64 layers.
VDSR_WEIGHTS = 2 * 3 * 3 * 64 + 18 * 3 * 3 * 64 * 64
# One byte per map value: a 512x512 map counts as 256 KiB.
MAP_BYTES_PER_VALUE = 1


class NetworkError(Exception):
    """Indicates problem with network structure or inputs."""


class Variant(enum.Enum):
    """Configurations of the transform layer and its constraints."""

    ORDSR = "ORDSR"
    DSR_OC = "DSR-OC"
    DSR_CC = "DSR-CC"
    DSR_UC = "DSR-UC"
    DCT_DSR = "DCT-DSR"
    ORDSR_RI = "ORDSR-RI"

    @property
    def cdct_trainable(self) -> bool:
        """Return True if the transform filters are optimized."""
        return self is not Variant.DCT_DSR

    @property
    def orthogonality(self) -> bool:
        """Return True if the orthogonality constraint is enforced."""
        return self in (Variant.ORDSR, Variant.DSR_OC, Variant.ORDSR_RI)

    @property
    def complexity(self) -> bool:
        """Return True if the complexity order constraint is enforced."""
        return self in (Variant.ORDSR, Variant.DSR_CC, Variant.ORDSR_RI)

    @property
    def dct_init(self) -> bool:
        """Return True if the bank starts from the DCT basis."""
        return self is not Variant.ORDSR_RI


class Regularization(NamedTuple):
    """Weights of the loss terms: weight decay, orthogonality, complexity order."""

    sigma: float = 1e-4
    gamma: float = 0.0
    lam: float = 0.0


class ParameterCount(NamedTuple):
    """Number of scalar weights and biases."""

    weights: int
    biases: int

    @property
    def total(self) -> int:
        """Return weights + biases."""
        return self.weights + self.biases


class ConvLayer:
    """Convolution layer holding m filters of shape c x k x k and m biases."""

    def __init__(self, weights: np.ndarray, biases: np.ndarray, relu: bool = True) -> None:
        """Wrap layer parameters.

        :raises:
            NetworkError: if shapes are inconsistent or the kernel is even-sized.
        """
        if weights.ndim != 4 or weights.shape[2] != weights.shape[3]:
            raise NetworkError(f"Layer weights must be (m, c, k, k), got {weights.shape}.")
        if weights.shape[2] % 2 == 0:
            raise NetworkError(f"Kernel size {weights.shape[2]} is even; same padding undefined.")
        if biases.shape != (weights.shape[0],):
            raise NetworkError(f"Expected {weights.shape[0]} biases, got {biases.shape}.")
        self.weights = weights
        self.biases = biases
        self.relu = relu

    @property
    def in_channels(self) -> int:
        """Return c."""
        return int(self.weights.shape[1])

    @property
    def out_channels(self) -> int:
        """Return m."""
        return int(self.weights.shape[0])

    @property
    def kernel(self) -> int:
        """Return k."""
        return int(self.weights.shape[2])


def make_rng(seed: int) -> np.random.Generator:
    """Return the PCG64 generator used for every seeded draw."""
    return np.random.Generator(np.random.PCG64(seed))


def fans(shape: Sequence[int]) -> Tuple[int, int]:
    """Return (fan_in, fan_out) of a dense (out, in) or conv (out, in, k, k) shape."""
    if len(shape) < 2:
        raise NetworkError(f"Cannot derive fan-in/fan-out from shape {tuple(shape)}.")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return int(shape[1]) * receptive, int(shape[0]) * receptive


def xavier_init(shape: Sequence[int], seed: int) -> np.ndarray:
    """Return float64 tensor drawn uniformly from +-sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = fans(shape)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return make_rng(seed).uniform(-limit, limit, size=tuple(shape))


def _columns(inputs: np.ndarray, kernel: int) -> np.ndarray:
    """Return im2col matrix (B * h * w, c * k * k) of zero-padded inputs (B, c, h, w)."""
    pad = (kernel - 1) // 2
    padded = np.pad(inputs, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (kernel, kernel), axis=(2, 3))
    batch, channels, rows, cols = inputs.shape
    windows = windows.transpose(0, 2, 3, 1, 4, 5)
    return windows.reshape(batch * rows * cols, channels * kernel * kernel)


def conv_preactivation(inputs: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Return a * W + b for batched inputs (B, c, h, w) without the ReLU."""
    if inputs.shape[1] != layer.in_channels:
        raise NetworkError(
            f"Layer expects {layer.in_channels} input channels, got {inputs.shape[1]}."
        )
    batch, _, rows, cols = inputs.shape
    kernel_matrix = layer.weights.reshape(layer.out_channels, -1)
    out = _columns(inputs, layer.kernel) @ kernel_matrix.T
    out = out.reshape(batch, rows, cols, layer.out_channels).transpose(0, 3, 1, 2)
    return out + layer.biases[None, :, None, None]


def conv_backward(
    grad: np.ndarray, inputs: np.ndarray, layer: ConvLayer
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Back-propagate through one convolution.

    :param grad: gradient with respect to the pre-activation, (B, m, h, w)
    :param inputs: layer input, (B, c, h, w)
    :return: gradients with respect to (inputs, weights, biases)
    """
    flat = grad.transpose(0, 2, 3, 1).reshape(-1, layer.out_channels)
    d_weights = (flat.T @ _columns(inputs, layer.kernel)).reshape(layer.weights.shape)
    d_biases = grad.sum(axis=(0, 2, 3))
    # Input gradient is a same-padded convolution with the flipped, transposed kernel.
    flipped = layer.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    batch, _, rows, cols = grad.shape
    d_inputs = _columns(grad, layer.kernel) @ flipped.reshape(layer.in_channels, -1).T
    d_inputs = d_inputs.reshape(batch, rows, cols, layer.in_channels).transpose(0, 3, 1, 2)
    return d_inputs, d_weights, d_biases


def conv2d_same(inputs: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Apply one layer to (c, h, w) or (B, c, h, w) inputs, preserving spatial dims.

    :raises:
        NetworkError: on channel mismatch.
    """
    single = inputs.ndim == 3
    batch = inputs[None] if single else inputs
    out = conv_preactivation(batch, layer)
    if layer.relu:
        out = np.maximum(out, 0)
    return out[0] if single else out


class ForwardCache(NamedTuple):
    """Intermediate values of one forward pass, kept for back-propagation."""

    images: np.ndarray
    cube: np.ndarray
    activations: List[np.ndarray]
    preactivations: List[np.ndarray]
    restored: np.ndarray
    output: np.ndarray


class Network:
    """Transform layer plus D-layer residual CNN.

    The network maps a bicubic-enlarged luminance image to its restored version:
    forward transform, CNN correction of the maps above the threshold, inverse
    transform with the same filters.
    """

    def __init__(
        self,
        bank: FilterBank,
        layers: List[ConvLayer],
        threshold: int,
        stride: int,
        variant: Variant = Variant.ORDSR,
        hyper: Regularization = Regularization(),
        final_relu: bool = True,
    ) -> None:
        """Assemble and validate network.

        :raises:
            NetworkError: if layer channels do not chain from N^2 inputs to N^2 - T outputs.
        """
        self.bank = bank
        self.layers = layers
        self.threshold = threshold
        self.stride = stride
        self.variant = variant
        self.hyper = hyper
        self.final_relu = final_relu
        self.cdct_trainable = variant.cdct_trainable
        self.check_finite = False
        self._validate()

    def _validate(self) -> None:
        maps = len(self.bank)
        if not self.layers:
            raise NetworkError("Network needs at least one convolution layer.")
        if not 0 <= self.threshold <= maps:
            raise NetworkError(f"Threshold {self.threshold} outside of [0, {maps}].")
        if self.bank.n % self.stride:
            raise NetworkError(f"Stride {self.stride} does not divide block size {self.bank.n}.")
        channels = maps
        for index, layer in enumerate(self.layers, start=1):
            if layer.in_channels != channels:
                raise NetworkError(
                    f"Layer {index} expects {layer.in_channels} channels, previous layer "
                    f"produces {channels}."
                )
            channels = layer.out_channels
        if channels != maps - self.threshold:
            raise NetworkError(
                f"Last layer produces {channels} maps, expected {maps - self.threshold}."
            )

    @property
    def dtype(self) -> np.dtype:
        """Return dtype of the parameters."""
        return self.bank.weights.dtype

    def parameter_names(self, include_bank: bool = True) -> List[str]:
        """Return names of the parameter arrays in declared order."""
        names = []
        for index in range(1, len(self.layers) + 1):
            names += [f"layer{index}.weights", f"layer{index}.biases"]
        if include_bank:
            names.append("bank")
        return names

    def parameters(self, include_bank: bool = True) -> List[np.ndarray]:
        """Return parameter arrays (live references) in declared order."""
        arrays = []
        for layer in self.layers:
            arrays += [layer.weights, layer.biases]
        if include_bank:
            arrays.append(self.bank.weights)
        return arrays

    def copy(self) -> "Network":
        """Return deep copy of the network."""
        return copy.deepcopy(self)

    def astype(self, dtype: np.dtype) -> "Network":
        """Return copy of the network with parameters cast to dtype."""
        clone = self.copy()
        clone.bank = clone.bank.astype(dtype)
        for layer in clone.layers:
            layer.weights = layer.weights.astype(dtype)
            layer.biases = layer.biases.astype(dtype)
        return clone

    def _batch(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 2:
            images = images[None]
        if images.ndim != 3:
            raise NetworkError(f"Expected (H, W) or (B, H, W) images, got {images.shape}.")
        try:
            validate_geometry(self.bank.n, self.stride, images.shape[1], images.shape[2])
        except CdctError as exc:
            raise NetworkError(str(exc)) from exc
        return images

    def run_cnn(
        self, cube: np.ndarray
    ) -> Tuple[np.ndarray, List[np.ndarray], List[np.ndarray]]:
        """Map a batched cube (B, N^2, P, Q) to the restored high maps.

        :return: (restored high maps, layer inputs, layer pre-activations)
        """
        activations = []
        preactivations = []
        current = cube
        for layer in self.layers:
            activations.append(current)
            z = conv_preactivation(current, layer)
            preactivations.append(z)
            current = np.maximum(z, 0) if layer.relu else z
        restored = current + cube[:, self.threshold :]
        if self.check_finite and not np.all(np.isfinite(restored)):
            raise NetworkError("Non-finite values in restored high-frequency maps.")
        return restored, activations, preactivations

    def forward_cache(self, images: np.ndarray) -> ForwardCache:
        """Run forward pass on (H, W) or (B, H, W) images keeping intermediates."""
        images = self._batch(images)
        cube = correlate(images, self.bank.weights, self.stride)
        high, activations, preactivations = self.run_cnn(cube)
        restored = np.concatenate([cube[:, : self.threshold], high], axis=1)
        output = transpose_correlate(restored, self.bank.weights, self.stride)
        output = output * overlap_weight(self.bank.n, self.stride)
        return ForwardCache(images, cube, activations, preactivations, restored, output)

    def forward(self, images: np.ndarray) -> np.ndarray:
        """Return network output F(x) with the same leading shape as the input."""
        output = self.forward_cache(images).output
        return output[0] if np.ndim(images) == 2 else output


def cnn_forward(split: CubeSplit, net: Network) -> np.ndarray:
    """Return restored high maps for the split cube of a single image.

    :raises:
        NetworkError: if the split does not match the network threshold.
    """
    if split.low.shape[0] != net.threshold:
        raise NetworkError(
            f"Split has {split.low.shape[0]} low maps, network threshold is {net.threshold}."
        )
    cube = np.concatenate([split.low, split.high], axis=0)[None].astype(net.dtype)
    if cube.shape[1] != len(net.bank):
        raise NetworkError(f"Split holds {cube.shape[1]} maps, bank has {len(net.bank)}.")
    restored, _, _ = net.run_cnn(cube)
    return restored[0]


def build_network(config: TrainConfig, bank: Optional[FilterBank] = None) -> Network:
    """Build network with Xavier-initialized CNN from configuration.

    The bank is the DCT basis unless the variant asks for random initialization,
    in which case it is drawn Xavier-uniform as well.
    """
    variant = Variant(config.variant)
    maps = config.block_size**2
    dtype = np.dtype(config.dtype)
    if bank is None:
        if variant.dct_init:
            bank = dct_basis(config.block_size)
        else:
            shape = (maps, 1, config.block_size, config.block_size)
            weights = xavier_init(shape, config.seed + 7919).reshape(maps, *shape[2:])
            bank = FilterBank(weights, FilterTag.RANDOM)

    layers = []
    channels = maps
    for index in range(config.depth):
        last = index == config.depth - 1
        out_channels = maps - config.t if last else config.filters
        kernel = config.first_kernel if index == 0 else config.kernel
        shape = (out_channels, channels, kernel, kernel)
        weights = xavier_init(shape, config.seed + index)
        relu = not last or config.final_relu
        layers.append(ConvLayer(weights, np.zeros(out_channels), relu=relu))
        channels = out_channels

    hyper = Regularization(
        sigma=config.sigma,
        gamma=config.gamma if variant.orthogonality else 0.0,
        lam=config.lam if variant.complexity else 0.0,
    )
    net = Network(bank, layers, config.t, config.stride, variant, hyper, config.final_relu)
    logger.debug("Built %s network with %d layers.", variant.value, len(layers))
    return net.astype(dtype)


def zero_cnn(net: Network) -> Network:
    """Return copy of the network with every CNN weight and bias set to zero."""
    clone = net.copy()
    for layer in clone.layers:
        layer.weights[...] = 0
        layer.biases[...] = 0
    return clone


def count_parameters(net: Network) -> ParameterCount:
    """Return scalar parameter counts; the bank counts as weights without biases."""
    weights = int(net.bank.weights.size)
    biases = 0
    for layer in net.layers:
        weights += int(layer.weights.size)
        biases += int(layer.biases.size)
    return ParameterCount(weights, biases)


def activation_memory(
    net: Network, height: int, width: int, bytes_per_value: int = MAP_BYTES_PER_VALUE
) -> int:
    """Return peak single-layer activation footprint in bytes.

    Only one layer's maps are assumed to be alive at a time, each of size
    (H / S) x (W / S), with the widest layer's channel count.
    """
    channels = max([len(net.bank)] + [layer.out_channels for layer in net.layers])
    return channels * (height // net.stride) * (width // net.stride) * bytes_per_value
