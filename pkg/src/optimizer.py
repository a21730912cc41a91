#!/usr/bin/env python3
# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.

"""Adam optimizer and learning-rate schedule."""
import logging
from typing import List, Sequence

import numpy as np

from config import TrainConfig

logger = logging.getLogger(__name__)


class OptimizerError(Exception):
    """Indicates problem with optimizer state or its inputs."""


class AdamState:
    """First/second moment estimates mirroring a list of parameter arrays."""

    def __init__(
        self,
        params: Sequence[np.ndarray],
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ) -> None:
        """Create zero moments for every parameter array."""
        self.first: List[np.ndarray] = [np.zeros_like(p) for p in params]
        self.second: List[np.ndarray] = [np.zeros_like(p) for p in params]
        self.step = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon

    @classmethod
    def from_config(cls, params: Sequence[np.ndarray], config: TrainConfig) -> "AdamState":
        """Create state using the betas and epsilon of a training configuration."""
        return cls(params, config.beta1, config.beta2, config.epsilon)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    learning_rate: float,
) -> None:
    """Apply one bias-corrected Adam update to params in place.

    :raises:
        OptimizerError: if params, grads and state do not have matching shapes.
    """
    if len(params) != len(grads) or len(params) != len(state.first):
        raise OptimizerError(
            f"Got {len(params)} parameters, {len(grads)} gradients and "
            f"{len(state.first)} moment slots."
        )
    for param, grad, first in zip(params, grads, state.first):
        if param.shape != grad.shape or param.shape != first.shape:
            raise OptimizerError(
                f"Shape mismatch: parameter {param.shape}, gradient {grad.shape}, "
                f"moment {first.shape}."
            )

    state.step += 1
    correction1 = 1 - state.beta1**state.step
    correction2 = 1 - state.beta2**state.step
    for param, grad, first, second in zip(params, grads, state.first, state.second):
        first *= state.beta1
        first += (1 - state.beta1) * grad
        second *= state.beta2
        second += (1 - state.beta2) * grad * grad
        update = (first / correction1) / (np.sqrt(second / correction2) + state.epsilon)
        param -= (learning_rate * update).astype(param.dtype)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Return step-decayed learning rate for a 0-based epoch within a phase."""
    return config.learning_rate * config.lr_decay ** (epoch // config.lr_decay_epochs)
