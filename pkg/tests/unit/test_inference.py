# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.
"""Unit tests for single-image super-resolution and evaluation."""
import os

import numpy as np
import pytest

import inference
from container import save_checkpoint
from imaging import ColorImage, bicubic_resize, read_image, rgb_to_ycbcr, write_image
from inference import InferenceError, InferenceRequest
from network import build_network, zero_cnn


@pytest.fixture()
def identity_net(tiny_config):
    """Return tiny network whose CNN is zero, so the whole network is the identity."""
    return zero_cnn(build_network(tiny_config))


@pytest.mark.parametrize(
    "shape, expected",
    [((12, 12), (0, 0)), ((13, 10), (1, 0)), ((3, 3), (1, 1)), ((2, 9), (2, 1))],
)
def test_padding_for(shape, expected):
    """Test padding to a stride multiple that is at least one block."""
    assert inference.padding_for(shape, 4, 2) == expected


@pytest.mark.parametrize("shape", [(12, 12), (13, 11), (3, 5), (2, 9)])
def test_restore_luma_identity(identity_net, shape):
    """Test that an identity network restores the plane, padded or not."""
    luma = np.random.default_rng(3).uniform(size=shape)
    restored = inference.restore_luma(identity_net, luma)
    assert restored.shape == shape
    np.testing.assert_allclose(restored, luma, atol=1e-12)


def test_self_ensemble_identity_non_square(identity_net):
    """Test that the eight-way ensemble of an identity network is the identity."""
    luma = np.random.default_rng(4).uniform(size=(14, 10))
    np.testing.assert_allclose(inference.self_ensemble(identity_net, luma), luma, atol=1e-12)


def test_self_ensemble_averages_branches(mocker, tiny_net):
    """Test that every orientation is restored once."""
    spy = mocker.spy(inference, "restore_luma")
    inference.self_ensemble(tiny_net, np.zeros((12, 8)))
    assert spy.call_count == inference.ENSEMBLE_SIZE
    shapes = {call.args[1].shape for call in spy.call_args_list}
    assert shapes == {(12, 8), (8, 12)}


def test_super_resolve_gray(identity_net, random_image):
    """Test that an identity network returns the clipped bicubic enlargement."""
    small = random_image[:10, :8]
    result = inference.super_resolve(identity_net, ColorImage(small), 3)
    assert result.is_gray
    assert result.y.shape == (30, 24)
    expected = np.clip(bicubic_resize(small, factor=3), 0, 1)
    np.testing.assert_allclose(result.y, expected, atol=1e-12)


def test_super_resolve_colour(identity_net):
    """Test that chroma planes are enlarged alongside the luminance."""
    image = rgb_to_ycbcr(np.random.default_rng(5).uniform(size=(8, 6, 3)))
    result = inference.super_resolve(identity_net, image, 2, ensemble=True)
    assert result.y.shape == result.cb.shape == result.cr.shape == (16, 12)


def test_super_resolve_scale_mismatch(identity_net):
    """Test that a network is not used at another scale than trained for."""
    with pytest.raises(InferenceError):
        inference.super_resolve(identity_net, ColorImage(np.zeros((8, 8))), 2, trained_scale=3)


def test_evaluate_identity_matches_bicubic(identity_net, smooth_image):
    """Test that an identity network scores exactly as the bicubic baseline."""
    rows = inference.evaluate(identity_net, [("smooth", smooth_image[:50, :49])], 3)
    assert len(rows) == 1
    row = rows[0]
    assert row.restored.psnr == pytest.approx(row.bicubic.psnr)
    assert row.restored.ssim == pytest.approx(row.bicubic.ssim)
    rendered = row.render()
    assert rendered["image"] == "smooth"
    assert rendered["crop"] == 3


def test_degrade_for_evaluation(smooth_image):
    """Test crop to the scale and the low-resolution size."""
    cropped, low = inference.degrade_for_evaluation(smooth_image[:50, :49], 3)
    assert cropped.shape == (48, 48)
    assert low.shape == (16, 16)


def test_run_request(tmp_path, tiny_config, identity_net, random_image):
    """Test the file-to-file path with a reference image."""
    ckpt = str(tmp_path / "net.ckpt")
    save_checkpoint(ckpt, identity_net, tiny_config)
    small = random_image[:10, :10]
    enlarged = np.clip(bicubic_resize(small, factor=3), 0, 1)
    write_image(str(tmp_path / "in.png"), ColorImage(small), bits=16)
    write_image(str(tmp_path / "ref.png"), ColorImage(enlarged), bits=16)
    request = InferenceRequest(
        ckpt,
        str(tmp_path / "in.png"),
        3,
        str(tmp_path / "out.png"),
        reference_path=str(tmp_path / "ref.png"),
    )
    outcome = inference.run_request(request)
    assert os.path.exists(request.output_path)
    assert read_image(request.output_path).y.shape == (30, 30)
    assert outcome.report.crop == 3
    assert outcome.report.psnr > 60
    assert outcome.metadata["padding"] == [0, 0]


def test_run_request_reference_mismatch(tmp_path, tiny_config, identity_net):
    """Test that a reference of another size is refused."""
    ckpt = str(tmp_path / "net.ckpt")
    save_checkpoint(ckpt, identity_net, tiny_config)
    write_image(str(tmp_path / "in.png"), ColorImage(np.full((10, 10), 0.5)))
    write_image(str(tmp_path / "ref.png"), ColorImage(np.full((20, 20), 0.5)))
    request = InferenceRequest(
        ckpt,
        str(tmp_path / "in.png"),
        3,
        str(tmp_path / "out.png"),
        reference_path=str(tmp_path / "ref.png"),
    )
    with pytest.raises(InferenceError):
        inference.run_request(request)
