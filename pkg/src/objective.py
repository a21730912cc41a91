#!/usr/bin/env python3
# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.

"""Regularized loss and its gradients.

Module focused on the training objective: reconstruction error, weight decay on
CNN weights, orthogonality and complexity order constraints on the transform
filters, hand-derived gradients of all of them and a central finite-difference
oracle used to verify those gradients.
"""
import functools
import logging
from typing import Callable, List, NamedTuple, Optional, Tuple

import numpy as np

from cdct import correlate, overlap_weight, window_products
from network import ForwardCache, Network, Regularization, conv_backward
from transform import bank_variances, dct_basis

logger = logging.getLogger(__name__)

LOSS_TERMS = ("mse", "weight_decay", "orthogonality", "complexity", "total")


class ObjectiveError(Exception):
    """Indicates problem with loss or gradient evaluation."""


class LossBreakdown(NamedTuple):
    """Loss terms, each already carrying its 1/2 factor, and the weights combining them."""

    mse: float
    weight_decay: float
    orthogonality: float
    complexity: float
    total: float
    hyper: Regularization

    def render(self) -> dict:
        """Return terms as a JSON-friendly dict."""
        return {term: float(getattr(self, term)) for term in LOSS_TERMS}


class GradientSet(NamedTuple):
    """Gradients mirroring the network parameters."""

    d_cnn_weights: List[np.ndarray]
    d_cnn_biases: List[np.ndarray]
    d_cdct: Optional[np.ndarray] = None

    def arrays(self) -> List[np.ndarray]:
        """Return gradients in the order of :meth:`Network.parameters`."""
        arrays = []
        for d_weights, d_biases in zip(self.d_cnn_weights, self.d_cnn_biases):
            arrays += [d_weights, d_biases]
        if self.d_cdct is not None:
            arrays.append(self.d_cdct)
        return arrays

    def map(self, func: Callable[[np.ndarray], np.ndarray]) -> "GradientSet":
        """Return new set with func applied to every array."""
        return GradientSet(
            [func(g) for g in self.d_cnn_weights],
            [func(g) for g in self.d_cnn_biases],
            None if self.d_cdct is None else func(self.d_cdct),
        )


class ParamCoordinate(NamedTuple):
    """Single scalar parameter addressed by array name and index."""

    name: str
    index: Tuple[int, ...]


@functools.lru_cache(maxsize=None)
def reference_variances(n: int) -> np.ndarray:
    """Return variances of the DCT basis filters of block size n, in zig-zag order."""
    return bank_variances(dct_basis(n).weights)


def orthogonality_penalty(weights: np.ndarray) -> float:
    """Return 1/2 sum over ordered pairs i != j of (vec(w_i)^T vec(w_j))^2."""
    vectors = weights.reshape(weights.shape[0], -1)
    gram = vectors @ vectors.T
    return 0.5 * float(np.sum(gram**2) - np.sum(np.diag(gram) ** 2))


def orthogonality_gradient(weights: np.ndarray) -> np.ndarray:
    """Return derivative of :func:`orthogonality_penalty`: 2 sum_{j != i} G_ij w_j."""
    vectors = weights.reshape(weights.shape[0], -1)
    gram = vectors @ vectors.T
    np.fill_diagonal(gram, 0)
    return (2 * gram @ vectors).reshape(weights.shape)


def variance_gradient(weights: np.ndarray) -> np.ndarray:
    """Return d var(w_i) / d w_i^a = 2 / (K - 1) * (w_i^a - mean(w_i)) for every filter."""
    flat = weights.reshape(weights.shape[0], -1)
    mean = flat.mean(axis=1, keepdims=True)
    return (2.0 / (flat.shape[1] - 1) * (flat - mean)).reshape(weights.shape)


def complexity_penalty(weights: np.ndarray) -> float:
    """Return 1/2 sum_t (var(w_t) - var(w_t^dct))^2."""
    gap = bank_variances(weights) - reference_variances(weights.shape[-1])
    return 0.5 * float(np.sum(gap**2))


def complexity_gradient(weights: np.ndarray) -> np.ndarray:
    """Return derivative of :func:`complexity_penalty`."""
    gap = bank_variances(weights) - reference_variances(weights.shape[-1])
    return gap[:, None, None].astype(weights.dtype) * variance_gradient(weights)


def weight_decay_penalty(net: Network) -> float:
    """Return 1/2 sum of squared CNN weights; biases and transform filters excluded."""
    return 0.5 * float(sum(np.sum(layer.weights**2) for layer in net.layers))


def _batch_targets(net: Network, images: np.ndarray, targets: np.ndarray) -> np.ndarray:
    if np.shape(images) != np.shape(targets):
        raise ObjectiveError(
            f"Input {np.shape(images)} and target {np.shape(targets)} dimensions differ."
        )
    targets = np.asarray(targets, dtype=net.dtype)
    return targets[None] if targets.ndim == 2 else targets


def _reconstruction(output: np.ndarray, targets: np.ndarray) -> float:
    diff = (output - targets).astype(np.float64)
    return 0.5 * float(np.sum(diff**2)) / targets.shape[0]


def _combine(net: Network, mse: float) -> LossBreakdown:
    hyper = net.hyper
    weight_decay = weight_decay_penalty(net)
    orthogonality = orthogonality_penalty(net.bank.weights)
    complexity = complexity_penalty(net.bank.weights)
    total = (
        mse + hyper.sigma * weight_decay + hyper.gamma * orthogonality + hyper.lam * complexity
    )
    return LossBreakdown(mse, weight_decay, orthogonality, complexity, total, hyper)


def loss(net: Network, images: np.ndarray, targets: np.ndarray) -> LossBreakdown:
    """Evaluate the regularized loss on one image or a batch.

    The reconstruction term is 1/2 sum of squared pixel errors per image, averaged
    over the batch.

    :raises:
        ObjectiveError: if inputs and targets differ in shape.
    """
    targets = _batch_targets(net, images, targets)
    return _combine(net, _reconstruction(net.forward_cache(images).output, targets))


def gradients(net: Network, images: np.ndarray, targets: np.ndarray) -> GradientSet:
    """Back-propagate the regularized loss through the whole network.

    Transform filters receive gradient from both their forward (analysis) and
    inverse (synthesis) use; the transform part is present only when the bank is
    trainable.

    :raises:
        ObjectiveError: if inputs and targets differ in shape.
    """
    targets = _batch_targets(net, images, targets)
    return _backward(net, net.forward_cache(images), targets)


def loss_and_gradients(
    net: Network, images: np.ndarray, targets: np.ndarray
) -> Tuple[LossBreakdown, GradientSet]:
    """Return loss and gradients sharing a single forward pass."""
    targets = _batch_targets(net, images, targets)
    cache = net.forward_cache(images)
    mse = _reconstruction(cache.output, targets)
    return _combine(net, mse), _backward(net, cache, targets)


def _backward(net: Network, cache: ForwardCache, targets: np.ndarray) -> GradientSet:
    weights = net.bank.weights
    n, stride, t = net.bank.n, net.stride, net.threshold
    weight = overlap_weight(n, stride)

    d_output = (cache.output - targets) / targets.shape[0]
    d_restored = weight * correlate(d_output, weights, stride)

    # Low maps are copied and high maps bypass the CNN, so both pass d_restored through.
    d_cube = d_restored.copy()

    d_cnn_weights: List[np.ndarray] = []
    d_cnn_biases: List[np.ndarray] = []
    grad = d_restored[:, t:]
    for layer, inputs, z in zip(
        reversed(net.layers), reversed(cache.activations), reversed(cache.preactivations)
    ):
        if layer.relu:
            grad = grad * (z > 0)
        grad, d_weights, d_biases = conv_backward(grad, inputs, layer)
        d_cnn_weights.insert(0, d_weights + net.hyper.sigma * layer.weights)
        d_cnn_biases.insert(0, d_biases)
    d_cube += grad

    d_cdct = None
    if net.cdct_trainable:
        d_cdct = weight * window_products(d_output, cache.restored, n, stride)
        d_cdct += window_products(cache.images, d_cube, n, stride)
        if net.hyper.gamma:
            d_cdct += net.hyper.gamma * orthogonality_gradient(weights)
        if net.hyper.lam:
            d_cdct += net.hyper.lam * complexity_gradient(weights)
    return GradientSet(d_cnn_weights, d_cnn_biases, d_cdct)


def _perturbed(net: Network, coordinate: ParamCoordinate, delta: float) -> Network:
    names = net.parameter_names()
    if coordinate.name not in names:
        raise ObjectiveError(f"Unknown parameter '{coordinate.name}'.")
    clone = net.copy()
    clone.parameters()[names.index(coordinate.name)][coordinate.index] += delta
    return clone


def finite_diff_oracle(
    net: Network,
    images: np.ndarray,
    targets: np.ndarray,
    coordinate: ParamCoordinate,
    h: float = 1e-5,
    term: str = "total",
) -> float:
    """Return central difference (L(theta + h e_k) - L(theta - h e_k)) / 2h.

    :param term: loss term to differentiate, one of LOSS_TERMS
    :raises:
        ObjectiveError: if h is not positive, the network is not float64 or the term
            is unknown.
    """
    if h <= 0:
        raise ObjectiveError(f"Finite-difference step must be positive, got {h}.")
    if net.dtype != np.float64:
        raise ObjectiveError("Finite-difference oracle needs a float64 network.")
    if term not in LOSS_TERMS:
        raise ObjectiveError(f"Unknown loss term '{term}'.")
    upper = getattr(loss(_perturbed(net, coordinate, h), images, targets), term)
    lower = getattr(loss(_perturbed(net, coordinate, -h), images, targets), term)
    return (upper - lower) / (2 * h)


def _relu_masks(net: Network, images: np.ndarray) -> List[np.ndarray]:
    cache = net.forward_cache(images)
    return [z > 0 for z, layer in zip(cache.preactivations, net.layers) if layer.relu]


def crosses_relu_kink(
    net: Network, images: np.ndarray, coordinate: ParamCoordinate, h: float = 1e-5
) -> bool:
    """Return True if perturbing the coordinate by +-h flips any ReLU activation pattern."""
    base = _relu_masks(net, images)
    for delta in (h, -h):
        masks = _relu_masks(_perturbed(net, coordinate, delta), images)
        if any(not np.array_equal(a, b) for a, b in zip(base, masks)):
            return True
    return False


def gradient_clip(grads: GradientSet, clip: float, mode: str = "value") -> GradientSet:
    """Clip gradients elementwise to [-clip, clip], or rescale to global norm `clip`.

    :raises:
        ObjectiveError: if clip is not positive or the mode is unknown.
    """
    if clip <= 0:
        raise ObjectiveError(f"Clip value must be positive, got {clip}.")
    if mode == "value":
        return grads.map(lambda g: np.clip(g, -clip, clip))
    if mode == "norm":
        norm = float(np.sqrt(sum(np.sum(g.astype(np.float64) ** 2) for g in grads.arrays())))
        if norm <= clip:
            return grads
        return grads.map(lambda g: g * (clip / norm))
    raise ObjectiveError(f"Unknown clip mode '{mode}'.")
