#!/usr/bin/env python3
# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.

"""Self-checks of the transform layer, the basis and the hand-derived gradients.

Every check returns a CheckResult with the largest deviation found so that a
failing build reports by how much it is off, not just that it is.
"""
import logging
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from cdct import (
    block_dct_oracle,
    cdct_forward,
    cdct_inverse,
    correlate,
    gram_matrix,
    transpose_correlate,
    validate_geometry,
)
from config import TrainConfig
from container import load_bank
from network import build_network, make_rng
from objective import ParamCoordinate, crosses_relu_kink, finite_diff_oracle, gradients
from transform import FilterBank, dct_basis, random_orthonormal_basis, zigzag

logger = logging.getLogger(__name__)

ORACLE_TOLERANCE = 1e-10
RECONSTRUCTION_TOLERANCE = 1e-9
GRAM_TOLERANCE = 1e-12
GRADIENT_TOLERANCE = 1e-6
CHECK_IMAGE_SIZE = 32

# Tiny float64 network used for the finite-difference comparison.
GRADIENT_CHECK_CONFIG = TrainConfig(
    block_size=4,
    stride=2,
    threshold=3,
    depth=3,
    filters=4,
    first_kernel=3,
    kernel=3,
    gamma=0.5,
    lam=0.5,
    sigma=0.1,
    patch_size=12,
    dtype="float64",
)


class CheckResult(NamedTuple):
    """Outcome of one check."""

    name: str
    passed: bool
    max_deviation: float
    detail: str = ""

    def render(self) -> Dict:
        """Return JSON-friendly dict."""
        return self._asdict()


def _result(name: str, deviation: float, tolerance: float, detail: str = "") -> CheckResult:
    passed = bool(deviation < tolerance)
    if not passed:
        logger.error("Check %s failed with deviation %.3g.", name, deviation)
    return CheckResult(name, passed, float(deviation), detail)


def check_basis_gram(n: int = 8) -> CheckResult:
    """Gram matrix of the DCT basis is the identity."""
    deviation = np.max(np.abs(gram_matrix(dct_basis(n)) - np.eye(n * n)))
    return _result("basis_gram", deviation, GRAM_TOLERANCE)


def check_zigzag(sizes: Sequence[int] = tuple(range(2, 17))) -> CheckResult:
    """Zig-zag order is a bijection between (k1, k2) pairs and 1..n^2."""
    failures = []
    for n in sizes:
        order = zigzag(n)
        pairs = list(order)
        if sorted(pairs) != [(a, b) for a in range(n) for b in range(n)]:
            failures.append(n)
            continue
        if any(order.index(*order.coords(i)) != i for i in range(1, n * n + 1)):
            failures.append(n)
    detail = f"broken for n={failures}" if failures else ""
    return _result("zigzag", float(len(failures)), 0.5, detail)


def check_forward_oracle(strides: Sequence[int], seeds: int, n: int = 8) -> CheckResult:
    """Strided convolution with the DCT bank equals the direct block DCT."""
    bank = dct_basis(n)
    deviation = 0.0
    for stride in strides:
        for seed in range(seeds):
            image = make_rng(seed).uniform(size=(CHECK_IMAGE_SIZE, CHECK_IMAGE_SIZE))
            fast = cdct_forward(image, bank, stride).maps
            slow = block_dct_oracle(image, stride, n).maps
            deviation = max(deviation, float(np.max(np.abs(fast - slow))))
    return _result("forward_oracle", deviation, ORACLE_TOLERANCE)


def check_reconstruction(strides: Sequence[int], seeds: int, n: int = 8) -> CheckResult:
    """Inverse of forward is the identity for the DCT and a random orthonormal bank."""
    deviation = 0.0
    for bank in (dct_basis(n), random_orthonormal_basis(n, seed=seeds)):
        for stride in strides:
            for seed in range(seeds):
                image = make_rng(seed).uniform(size=(CHECK_IMAGE_SIZE, CHECK_IMAGE_SIZE))
                restored = cdct_inverse(cdct_forward(image, bank, stride), bank)
                deviation = max(deviation, float(np.max(np.abs(restored - image))))
    return _result("reconstruction", deviation, RECONSTRUCTION_TOLERANCE)


def check_adjoint(strides: Sequence[int], n: int = 8, seed: int = 0) -> CheckResult:
    """<correlate(x), F> equals <x, transpose_correlate(F)>."""
    rng = make_rng(seed)
    weights = random_orthonormal_basis(n, seed).weights
    deviation = 0.0
    for stride in strides:
        image = rng.standard_normal((CHECK_IMAGE_SIZE, CHECK_IMAGE_SIZE))
        side = CHECK_IMAGE_SIZE // stride
        maps = rng.standard_normal((n * n, side, side))
        left = float(np.sum(correlate(image, weights, stride) * maps))
        right = float(np.sum(image * transpose_correlate(maps, weights, stride)))
        deviation = max(deviation, abs(left - right) / max(abs(left), 1.0))
    return _result("adjoint", deviation, ORACLE_TOLERANCE)


def check_parseval(n: int = 8, seed: int = 0) -> CheckResult:
    """With stride N the orthonormal transform preserves energy."""
    image = make_rng(seed).uniform(size=(CHECK_IMAGE_SIZE, CHECK_IMAGE_SIZE))
    cube = cdct_forward(image, dct_basis(n), n)
    deviation = abs(float(np.sum(image**2)) - float(np.sum(cube.maps**2)))
    return _result("parseval", deviation, ORACLE_TOLERANCE * image.size)


def relative_error(analytic: float, numeric: float) -> float:
    """Return |a - b| / max(|a|, |b|), with a floor of 1e-4 on the denominator."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)


def gradient_check(
    seed: int,
    samples: int = 4,
    config: TrainConfig = GRADIENT_CHECK_CONFIG,
) -> float:
    """Return largest relative gradient error on randomly sampled coordinates.

    Coordinates whose +-h perturbation flips a ReLU are skipped.
    """
    net = build_network(config._replace(seed=seed))
    rng = make_rng(seed)
    for layer in net.layers:
        layer.biases[...] = rng.uniform(-0.1, 0.1, size=layer.biases.shape)
    size = config.patch_size
    images = rng.uniform(size=(2, size, size))
    targets = rng.uniform(size=(2, size, size))
    analytic = gradients(net, images, targets).arrays()

    worst = 0.0
    for name, grad in zip(net.parameter_names(), analytic):
        for _ in range(samples):
            index = tuple(int(rng.integers(0, dim)) for dim in grad.shape)
            coordinate = ParamCoordinate(name, index)
            if crosses_relu_kink(net, images, coordinate):
                logger.debug("Skipping %s%s at a ReLU kink.", name, index)
                continue
            numeric = finite_diff_oracle(net, images, targets, coordinate)
            worst = max(worst, relative_error(float(grad[index]), numeric))
    return worst


def check_gradients(seeds: int) -> CheckResult:
    """Analytic gradients agree with central finite differences."""
    deviation = max(gradient_check(seed) for seed in range(seeds))
    return _result("gradients", deviation, GRADIENT_TOLERANCE)


def check_bank_gram(bank: FilterBank, tolerance: float = 1e-6) -> CheckResult:
    """Bank is orthonormal; the detail names the filters (1-based) that break it.

    A single bad filter disturbs its whole Gram row and column, so offenders are
    picked greedily: the filter with most deviating entries is flagged and
    removed until the remaining Gram block is clean.
    """
    deviation = np.abs(gram_matrix(bank) - np.eye(len(bank)))
    worst = float(np.max(deviation))
    failing = deviation >= tolerance
    bad = []
    while failing.any():
        counts = failing.sum(axis=1)
        index = int(np.argmax(counts))
        bad.append(index + 1)
        failing[index, :] = False
        failing[:, index] = False
    detail = f"non-orthonormal filters: {sorted(bad)}" if bad else ""
    return _result("bank_gram", worst, tolerance, detail)


def run_checks(
    strides: Sequence[int] = (2, 4, 8),
    seeds: int = 5,
    n: int = 8,
    bank_path: Optional[str] = None,
    gradient_seeds: int = 2,
) -> List[CheckResult]:
    """Run every check.

    :raises:
        CdctError: if a stride does not divide the block size; raised before any
            check runs.
    """
    for stride in strides:
        validate_geometry(n, stride, CHECK_IMAGE_SIZE, CHECK_IMAGE_SIZE)

    results = [
        check_basis_gram(n),
        check_zigzag(),
        check_forward_oracle(strides, seeds, n),
        check_reconstruction(strides, seeds, n),
        check_adjoint(strides, n),
        check_parseval(n),
        check_gradients(gradient_seeds),
    ]
    if bank_path:
        results.append(check_bank_gram(load_bank(bank_path)))
    return results
