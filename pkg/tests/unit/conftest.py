# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.
"""Fixtures for unit tests."""
import numpy as np
import pytest

from config import TrainConfig
from dataset import synthetic_image
from network import Network, build_network, make_rng
from transform import FilterBank, dct_basis


@pytest.fixture(scope="session")
def dct8() -> FilterBank:
    """Return the 8x8 DCT basis bank."""
    return dct_basis(8)


@pytest.fixture()
def rng() -> np.random.Generator:
    """Return seeded generator."""
    return make_rng(1234)


@pytest.fixture()
def random_image(rng) -> np.ndarray:
    """Return 32x32 uniform random image."""
    return rng.uniform(size=(32, 32))


@pytest.fixture(scope="session")
def tiny_config() -> TrainConfig:
    """Return float64 configuration of a tiny network (N=4, D=3, 4 filters)."""
    return TrainConfig(
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
        patch_overlap=4,
        dtype="float64",
    )


@pytest.fixture()
def tiny_net(tiny_config) -> Network:
    """Return tiny float64 network with small random biases."""
    net = build_network(tiny_config)
    rng = make_rng(7)
    for layer in net.layers:
        layer.biases[...] = rng.uniform(-0.1, 0.1, size=layer.biases.shape)
    return net


@pytest.fixture()
def desk_config(tmp_path) -> TrainConfig:
    """Return small float64 training configuration writing into a temporary directory."""
    return TrainConfig(
        depth=3,
        filters=8,
        batch_size=4,
        epochs=2,
        max_steps=3,
        augment=False,
        dtype="float64",
        checkpoint_dir=str(tmp_path / "checkpoints"),
    )


@pytest.fixture(scope="session")
def smooth_image() -> np.ndarray:
    """Return 96x96 synthetic image with blurred edges and texture."""
    return synthetic_image(96, 96, seed=3)
