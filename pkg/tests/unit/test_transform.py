# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.
"""Unit tests for the DCT basis, zig-zag order and filter variance."""
import numpy as np
import pytest
from scipy import stats
from scipy.fft import dctn

import transform
from transform import FilterBank, FilterTag, TransformError


def test_dct_basis_gram_is_identity(dct8):
    """Test that the 8x8 DCT bank is orthonormal."""
    vectors = dct8.vectors()
    np.testing.assert_allclose(vectors @ vectors.T, np.eye(64), atol=1e-12)
    assert dct8.tag == FilterTag.DCT_INITIALIZED


def test_dct_basis_first_filter_is_constant(dct8):
    """Test that filter 1 is the DC filter with value 1/N."""
    np.testing.assert_allclose(dct8[1].values, np.full((8, 8), 1 / 8), atol=1e-15)


def test_dct_basis_matches_scipy_dct(dct8, rng):
    """Test that correlating a block with the bank yields orthonormal DCT-II coefficients."""
    block = rng.uniform(size=(8, 8))
    coefficients = dctn(block, type=2, norm="ortho")
    order = transform.zigzag(8)
    for i, (k1, k2) in enumerate(order, start=1):
        assert np.sum(dct8[i].values * block) == pytest.approx(coefficients[k1, k2], abs=1e-12)


def test_zigzag_jpeg_start():
    """Test that the traversal starts like the JPEG scan."""
    order = list(transform.zigzag(8))
    assert order[:6] == [(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2)]
    assert order[-1] == (7, 7)


@pytest.mark.parametrize("n", range(2, 17))
def test_zigzag_bijection(n):
    """Test that index and coords are inverse bijections."""
    order = transform.zigzag(n)
    assert len(order) == n * n
    assert sorted(order) == [(a, b) for a in range(n) for b in range(n)]
    for i in range(1, n * n + 1):
        assert order.index(*order.coords(i)) == i


@pytest.mark.parametrize("args", [(8, 0), (0, 8), (-1, 0)])
def test_zigzag_index_out_of_range(args):
    """Test that frequencies outside the block are rejected."""
    with pytest.raises(TransformError):
        transform.zigzag(8).index(*args)


@pytest.mark.parametrize("i", [0, 65])
def test_zigzag_coords_out_of_range(i):
    """Test that indices outside 1..N^2 are rejected."""
    with pytest.raises(TransformError):
        transform.zigzag(8).coords(i)


def test_filter_variance_hand_cases(dct8):
    """Test variance of a constant filter and of the 2x2 alternating filter."""
    assert transform.filter_variance(dct8[1].values) == pytest.approx(0.0, abs=1e-30)
    assert transform.filter_variance(np.array([[1.0, -1.0], [1.0, -1.0]])) == pytest.approx(4 / 3)


def test_filter_variance_translation_invariant(rng):
    """Test that adding a constant does not change the variance."""
    values = rng.standard_normal((8, 8))
    assert transform.filter_variance(values + 3.0) == pytest.approx(
        transform.filter_variance(values)
    )


def test_filter_variance_needs_two_entries():
    """Test that a single-entry filter is rejected."""
    with pytest.raises(TransformError):
        transform.filter_variance(np.array([[1.0]]))


def test_basis_variance_positive_beyond_dc_and_trending_up(dct8):
    """Test that variance is zero only for DC and grows with index on average."""
    variances = transform.bank_variances(dct8.weights)
    assert variances[0] == pytest.approx(0.0, abs=1e-30)
    assert np.all(variances[1:] > 0)
    correlation = stats.spearmanr(np.arange(64), variances).correlation
    assert correlation > 0


def test_random_orthonormal_basis_is_orthonormal():
    """Test that the random bank is orthonormal and reproducible."""
    bank = transform.random_orthonormal_basis(4, seed=3)
    np.testing.assert_allclose(bank.vectors() @ bank.vectors().T, np.eye(16), atol=1e-12)
    np.testing.assert_array_equal(
        bank.weights, transform.random_orthonormal_basis(4, seed=3).weights
    )


@pytest.mark.parametrize(
    "weights",
    [
        np.zeros((64, 8)),  # wrong rank
        np.zeros((63, 8, 8)),  # wrong filter count
        np.zeros((4, 2, 3)),  # not square
        np.full((4, 2, 2), np.nan),  # not finite
    ],
)
def test_filter_bank_rejects_invalid_weights(weights):
    """Test validation of filter bank weights."""
    with pytest.raises(TransformError):
        FilterBank(weights)


def test_filter_bank_indexing(dct8):
    """Test 1-based indexing, copy and retagging."""
    assert len(dct8) == 64
    assert dct8.n == 8
    assert len(dct8.filters) == 64
    assert dct8.filters[5].tag == FilterTag.DCT_INITIALIZED
    np.testing.assert_array_equal(dct8.filters[5].values, dct8[6].values)
    with pytest.raises(TransformError):
        dct8[0]  # pylint: disable=pointless-statement
    copy = dct8.copy(FilterTag.LEARNED)
    copy.weights[0] = 0
    assert copy.tag == FilterTag.LEARNED
    assert dct8.weights[0, 0, 0] != 0


def test_block_size_too_small():
    """Test that block sizes below 2 are rejected."""
    with pytest.raises(TransformError):
        transform.dct_basis(1)
