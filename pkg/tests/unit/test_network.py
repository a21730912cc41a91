# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.
"""Unit tests for the residual CNN and its accounting."""
import numpy as np
import pytest

import network
from cdct import CubeSplit, cdct_forward, split_cube
from config import TrainConfig
from network import ConvLayer, NetworkError, Variant
from transform import FilterTag, dct_basis


def test_conv_identity_filter(rng):
    """Test that a 1x1 identity filter with zero bias is a ReLU."""
    inputs = rng.standard_normal((2, 6, 6))
    weights = np.eye(2).reshape(2, 2, 1, 1)
    out = network.conv2d_same(inputs, ConvLayer(weights, np.zeros(2)))
    np.testing.assert_array_equal(out, np.maximum(inputs, 0))


def test_conv_zero_weights_bias(rng):
    """Test that zero weights produce max(bias, 0) everywhere."""
    layer = ConvLayer(np.zeros((2, 3, 3, 3)), np.array([0.7, -0.2]))
    out = network.conv2d_same(rng.standard_normal((3, 5, 5)), layer)
    np.testing.assert_array_equal(out[0], np.full((5, 5), 0.7))
    np.testing.assert_array_equal(out[1], np.zeros((5, 5)))


def test_conv_averaging_filter():
    """Test 3x3 averaging of a constant map: interior keeps value, corner loses 5/9."""
    layer = ConvLayer(np.full((1, 1, 3, 3), 1 / 9), np.zeros(1), relu=False)
    out = network.conv2d_same(np.full((1, 6, 6), 2.0), layer)
    assert out[0, 2, 3] == pytest.approx(2.0)
    assert out[0, 0, 0] == pytest.approx(2.0 * 4 / 9)


def test_conv_matches_direct_sum(rng):
    """Test im2col convolution against an explicit zero-padded cross-correlation."""
    inputs = rng.standard_normal((2, 5, 4))
    weights = rng.standard_normal((3, 2, 3, 3))
    biases = rng.standard_normal(3)
    out = network.conv2d_same(inputs, ConvLayer(weights, biases, relu=False))
    padded = np.pad(inputs, ((0, 0), (1, 1), (1, 1)))
    for m in range(3):
        for r in range(5):
            for c in range(4):
                expected = np.sum(weights[m] * padded[:, r : r + 3, c : c + 3]) + biases[m]
                assert out[m, r, c] == pytest.approx(expected)


def test_conv_rejects_channel_mismatch(rng):
    """Test that a wrong channel count is an error."""
    layer = ConvLayer(np.zeros((2, 3, 3, 3)), np.zeros(2))
    with pytest.raises(NetworkError):
        network.conv2d_same(rng.standard_normal((4, 5, 5)), layer)


@pytest.mark.parametrize(
    "weights, biases",
    [
        (np.zeros((2, 3, 2, 2)), np.zeros(2)),  # even kernel
        (np.zeros((2, 3, 3, 3)), np.zeros(3)),  # bias count
        (np.zeros((2, 3, 3)), np.zeros(2)),  # rank
    ],
)
def test_conv_layer_validation(weights, biases):
    """Test ConvLayer shape validation."""
    with pytest.raises(NetworkError):
        ConvLayer(weights, biases)


def test_xavier_init_deterministic_and_scaled():
    """Test seeding and variance of Xavier-uniform draws."""
    shape = (100, 100, 3, 3)
    first = network.xavier_init(shape, seed=1)
    np.testing.assert_array_equal(first, network.xavier_init(shape, seed=1))
    assert not np.array_equal(first, network.xavier_init(shape, seed=2))
    fan_in, fan_out = network.fans(shape)
    assert (fan_in, fan_out) == (900, 900)
    bound = np.sqrt(6 / (fan_in + fan_out))
    assert np.max(np.abs(first)) <= bound
    assert np.var(first) == pytest.approx(2 / (fan_in + fan_out), rel=0.1)


def test_residual_pass_through(tiny_config, rng):
    """Test that a zero CNN returns the high maps unchanged."""
    net = network.zero_cnn(network.build_network(tiny_config))
    cube = cdct_forward(rng.uniform(size=(12, 12)), net.bank, net.stride)
    split = split_cube(cube, net.threshold)
    np.testing.assert_array_equal(network.cnn_forward(split, net), split.high)


def test_single_layer_network_by_hand(tiny_config):
    """Test D=1: output = max(conv(a, W) + b, 0) + f_high, checked on two maps."""
    net = network.build_network(tiny_config._replace(depth=1))
    assert net.layers[0].out_channels == 13
    bank = dct_basis(4)
    weights = np.zeros((15, 16, 1, 1))
    weights[0, 0, 0, 0] = 2.0
    weights[1, 0, 0, 0] = -1.0
    biases = np.zeros(15)
    biases[0] = 0.5
    toy = network.Network(bank, [ConvLayer(weights, biases)], 1, 2)
    low = np.full((1, 4, 4), 1.5)
    high = np.zeros((15, 4, 4))
    high[0] = 1.0
    restored = network.cnn_forward(CubeSplit(low, high), toy)
    np.testing.assert_allclose(restored[0], np.full((4, 4), 2 * 1.5 + 0.5 + 1.0))
    np.testing.assert_allclose(restored[1], np.zeros((4, 4)))


def test_cnn_forward_rejects_wrong_threshold(tiny_net, rng):
    """Test that a split at another threshold is refused."""
    cube = cdct_forward(rng.uniform(size=(12, 12)), tiny_net.bank, 2)
    with pytest.raises(NetworkError):
        network.cnn_forward(split_cube(cube, 2), tiny_net)


def test_output_map_count():
    """Test that the last layer produces 64 - T maps."""
    net = network.build_network(TrainConfig(depth=2, filters=4))
    assert net.threshold == 4
    assert net.layers[-1].out_channels == 60
    assert net.layers[0].in_channels == 64
    assert net.layers[0].kernel == 5


def test_residual_identity_end_to_end(tiny_config, rng):
    """Test that a zero CNN makes the network the identity up to rounding."""
    net = network.zero_cnn(network.build_network(tiny_config))
    image = rng.uniform(size=(12, 12))
    np.testing.assert_allclose(net.forward(image), image, rtol=0, atol=1e-12)


def test_forward_is_deterministic(tiny_config, rng):
    """Test that identical seeds give identical outputs."""
    image = rng.uniform(size=(12, 12))
    first = network.build_network(tiny_config).forward(image)
    second = network.build_network(tiny_config).forward(image)
    np.testing.assert_array_equal(first, second)


def test_count_parameters_standard():
    """Test parameter arithmetic of the standard configuration."""
    count = network.count_parameters(network.build_network(TrainConfig()))
    assert count.weights == 620288
    assert count.biases == 956
    assert network.VDSR_WEIGHTS == 664704
    assert network.VDSR_WEIGHTS - count.weights == 44416


def test_activation_memory():
    """Test activation footprint and its area scaling."""
    net = network.build_network(TrainConfig(depth=2, filters=4))
    assert network.activation_memory(net, 512, 512) == 4 * 2**20
    assert network.activation_memory(net, 512, 512, bytes_per_value=4) == 64 * 256 * 256 * 4
    assert network.activation_memory(net, 1024, 1024) == 4 * network.activation_memory(
        net, 512, 512
    )
    full_stride = network.build_network(TrainConfig(depth=2, filters=4, stride=1))
    assert network.activation_memory(full_stride, 512, 512) == 16 * 2**20


@pytest.mark.parametrize(
    "variant, trainable, gamma, lam, tag",
    [
        ("ORDSR", True, 3.5, 0.75, FilterTag.DCT_INITIALIZED),
        ("DSR-OC", True, 3.5, 0.0, FilterTag.DCT_INITIALIZED),
        ("DSR-CC", True, 0.0, 0.75, FilterTag.DCT_INITIALIZED),
        ("DSR-UC", True, 0.0, 0.0, FilterTag.DCT_INITIALIZED),
        ("DCT-DSR", False, 0.0, 0.0, FilterTag.DCT_INITIALIZED),
        ("ORDSR-RI", True, 3.5, 0.75, FilterTag.RANDOM),
    ],
)
def test_variants(variant, trainable, gamma, lam, tag):
    """Test flags and loss weights selected by each variant."""
    net = network.build_network(TrainConfig(depth=2, filters=4, variant=variant))
    assert net.variant == Variant(variant)
    assert net.cdct_trainable is trainable
    assert net.hyper.gamma == gamma
    assert net.hyper.lam == lam
    assert net.bank.tag == tag


def test_network_rejects_broken_chain(dct8):
    """Test that layer channels must chain from N^2 to N^2 - T."""
    layers = [ConvLayer(np.zeros((8, 64, 3, 3)), np.zeros(8))]
    with pytest.raises(NetworkError):
        network.Network(dct8, layers, 4, 2)


@pytest.mark.parametrize(
    "layers, threshold, stride, message",
    [
        ([], 4, 2, "at least one"),
        ([ConvLayer(np.zeros((60, 64, 3, 3)), np.zeros(60))], 65, 2, "Threshold"),
        ([ConvLayer(np.zeros((60, 64, 3, 3)), np.zeros(60))], 4, 3, "Stride"),
        (
            [
                ConvLayer(np.zeros((8, 64, 3, 3)), np.zeros(8)),
                ConvLayer(np.zeros((60, 16, 3, 3)), np.zeros(60)),
            ],
            4,
            2,
            "Layer 2 expects 16",
        ),
    ],
)
def test_network_validation_messages(dct8, layers, threshold, stride, message):
    """Test each structural check of the network."""
    with pytest.raises(NetworkError, match=message):
        network.Network(dct8, layers, threshold, stride)


def test_network_rejects_bad_input_rank(tiny_net):
    """Test that only (H, W) or (B, H, W) inputs are accepted."""
    with pytest.raises(NetworkError):
        tiny_net.forward(np.zeros((1, 1, 12, 12)))


def test_fans_needs_two_axes():
    """Test that fans are undefined for vectors."""
    with pytest.raises(NetworkError):
        network.fans((5,))
    assert network.fans((3, 4)) == (4, 3)


def test_cnn_forward_rejects_wrong_map_count(tiny_net):
    """Test that a split from another block size is refused."""
    split = CubeSplit(np.zeros((tiny_net.threshold, 6, 6)), np.zeros((3, 6, 6)))
    with pytest.raises(NetworkError, match="bank has"):
        network.cnn_forward(split, tiny_net)


def test_network_rejects_bad_input_shape(tiny_net):
    """Test that images not tiled by the stride are refused."""
    with pytest.raises(NetworkError):
        tiny_net.forward(np.zeros((13, 12)))


def test_check_finite(tiny_net):
    """Test that non-finite restored maps raise when checking is on."""
    tiny_net.check_finite = True
    tiny_net.layers[-1].biases[...] = np.inf
    with pytest.raises(NetworkError):
        tiny_net.forward(np.ones((12, 12)))


def test_astype_and_parameters(tiny_net):
    """Test dtype casting and the parameter list order."""
    single = tiny_net.astype(np.float32)
    assert single.dtype == np.float32
    assert single.parameter_names()[:2] == ["layer1.weights", "layer1.biases"]
    assert single.parameter_names()[-1] == "bank"
    assert len(single.parameters(include_bank=False)) == 2 * len(single.layers)
