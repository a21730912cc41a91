#!/usr/bin/env python3
# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.

"""DCT basis helper.

Module focused on generating the orthonormal DCT-II filter bank, the zig-zag
ordering of its basis indices and the filter statistics used by the complexity
order constraint.
"""
import enum
import logging
from typing import Dict, Iterator, List, NamedTuple, Optional

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_SIZE = 8


class TransformError(Exception):
    """Indicates problem with transform basis arguments."""


class FilterTag(enum.Enum):
    """Origin of the values held by a filter."""

    DCT_INITIALIZED = "dct"
    LEARNED = "learned"
    RANDOM = "random"


class BasisIndex2D(NamedTuple):
    """Frequency index pair (k1, k2) of a 2D DCT basis function."""

    k1: int
    k2: int


class Filter(NamedTuple):
    """Single N x N transform filter."""

    values: np.ndarray
    tag: FilterTag = FilterTag.LEARNED


class ZigZag:
    """JPEG-style zig-zag bijection between (k1, k2) and the 1-based index i."""

    def __init__(self, n: int) -> None:
        """Build the traversal for blocks of size n."""
        _check_block_size(n)
        self.n = n
        pairs = [BasisIndex2D(k1, k2) for k1 in range(n) for k2 in range(n)]
        # Odd anti-diagonals run with growing k1, even ones with shrinking k1.
        pairs.sort(key=lambda p: (p.k1 + p.k2, p.k1 if (p.k1 + p.k2) % 2 else -p.k1))
        self._order: List[BasisIndex2D] = pairs
        self._index: Dict[BasisIndex2D, int] = {p: i + 1 for i, p in enumerate(pairs)}

    def __len__(self) -> int:
        """Return number of basis indices (n^2)."""
        return len(self._order)

    def __iter__(self) -> Iterator[BasisIndex2D]:
        """Iterate (k1, k2) pairs in zig-zag order."""
        return iter(self._order)

    def index(self, k1: int, k2: int) -> int:
        """Return 1-based zig-zag index of the pair (k1, k2)."""
        try:
            return self._index[BasisIndex2D(k1, k2)]
        except KeyError as exc:
            raise TransformError(
                f"Frequency index ({k1}, {k2}) outside of [0, {self.n - 1}]."
            ) from exc

    def coords(self, i: int) -> BasisIndex2D:
        """Return the (k1, k2) pair stored at 1-based zig-zag index i."""
        if not 1 <= i <= len(self._order):
            raise TransformError(f"Zig-zag index {i} outside of [1, {len(self._order)}].")
        return self._order[i - 1]


class FilterBank:
    """Ordered family of N^2 filters of size N x N.

    Filters are stored as one (N^2, N, N) array so that the convolution code can
    use them without copying. Index i of the public API is 1-based, matching the
    zig-zag numbering.
    """

    def __init__(self, weights: np.ndarray, tag: FilterTag = FilterTag.LEARNED) -> None:
        """Wrap filter weights.

        :param weights: array of shape (N^2, N, N)
        :param tag: origin of the filter values
        :raises:
            TransformError: if the array does not hold exactly N^2 finite N x N filters.
        """
        weights = np.asarray(weights)
        if weights.ndim != 3 or weights.shape[1] != weights.shape[2]:
            raise TransformError(f"Filter bank must have shape (N^2, N, N), got {weights.shape}.")
        n = weights.shape[1]
        if weights.shape[0] != n * n:
            raise TransformError(
                f"Filter bank of {n}x{n} filters needs {n * n} filters, got {weights.shape[0]}."
            )
        if not np.all(np.isfinite(weights)):
            raise TransformError("Filter bank contains non-finite values.")
        self.weights = weights
        self.tag = tag

    @property
    def n(self) -> int:
        """Return block size N."""
        return int(self.weights.shape[1])

    @property
    def filters(self) -> List[Filter]:
        """Return the filters as a list in index order."""
        return [Filter(values, self.tag) for values in self.weights]

    def __len__(self) -> int:
        """Return number of filters."""
        return int(self.weights.shape[0])

    def __getitem__(self, i: int) -> Filter:
        """Return filter with 1-based index i."""
        if not 1 <= i <= len(self):
            raise TransformError(f"Filter index {i} outside of [1, {len(self)}].")
        return Filter(self.weights[i - 1], self.tag)

    def vectors(self) -> np.ndarray:
        """Return filters flattened to rows of an (N^2, N^2) matrix."""
        return self.weights.reshape(len(self), -1)

    def astype(self, dtype: np.dtype) -> "FilterBank":
        """Return copy of the bank with values cast to dtype."""
        return FilterBank(self.weights.astype(dtype), self.tag)

    def copy(self, tag: Optional[FilterTag] = None) -> "FilterBank":
        """Return deep copy of the bank, optionally re-tagged."""
        return FilterBank(self.weights.copy(), tag or self.tag)


def _check_block_size(n: int) -> None:
    if n < 2:
        raise TransformError(f"Block size must be at least 2, got {n}.")


def cosine_matrix(n: int) -> np.ndarray:
    """Return orthonormal 1D DCT-II matrix C with C[k, m] = a(k) cos(pi (2m + 1) k / 2n)."""
    _check_block_size(n)
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    scale = np.full((n, 1), np.sqrt(2.0 / n))
    scale[0, 0] = np.sqrt(1.0 / n)
    return scale * np.cos(np.pi * (2 * m + 1) * k / (2 * n))


def zigzag(n: int) -> ZigZag:
    """Return zig-zag bijection for block size n."""
    return ZigZag(n)


def dct_basis(n: int = DEFAULT_BLOCK_SIZE) -> FilterBank:
    """Return the N^2 orthonormal DCT-II basis filters in zig-zag order.

    Scaling is a(0) = sqrt(1/N), a(k) = sqrt(2/N), so that the Gram matrix of
    the bank is the identity.

    :param n: block size N
    :raises:
        TransformError: if n < 2
    """
    cos = cosine_matrix(n)
    weights = np.stack([np.outer(cos[k1], cos[k2]) for k1, k2 in zigzag(n)])
    return FilterBank(weights, FilterTag.DCT_INITIALIZED)


def random_orthonormal_basis(n: int, seed: int) -> FilterBank:
    """Return a random orthonormal bank obtained by QR-orthonormalizing a Gaussian matrix."""
    _check_block_size(n)
    rng = np.random.Generator(np.random.PCG64(seed))
    q, _ = np.linalg.qr(rng.standard_normal((n * n, n * n)))
    return FilterBank(q.reshape(n * n, n, n), FilterTag.RANDOM)


def filter_variance(values: np.ndarray) -> float:
    """Return Bessel-corrected variance of the entries of one filter.

    :raises:
        TransformError: if the filter has fewer than two entries.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        raise TransformError("Variance needs a filter with at least two entries.")
    return float(np.var(values, ddof=1))


def bank_variances(weights: np.ndarray) -> np.ndarray:
    """Return Bessel-corrected variance of each filter in an (M, N, N) array."""
    flat = weights.reshape(weights.shape[0], -1)
    return np.var(flat, axis=1, ddof=1)
