#!/usr/bin/env python3
# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.

"""Two-phase training.

Phase one ("pretrain") keeps the transform filters frozen at the DCT basis with
both filter constraints switched off and optimizes the CNN only. Phase two
("main") adds the filters to the trainable set (if the variant allows it) and
enforces the constraints of the variant. A variant whose bank starts random
skips phase one and receives the epoch budget of both phases instead.

Per-step loss terms are appended to a line-delimited JSON log; a checkpoint is
written at the end of every epoch.
"""
import json
import logging
import math
import os
from typing import Any, Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from config import TrainConfig
from container import save_checkpoint
from dataset import PatchPair, stack_batch
from network import Network, Regularization, Variant, build_network, make_rng
from objective import gradient_clip, loss_and_gradients
from optimizer import AdamState, adam_step, learning_rate
from transform import FilterTag

logger = logging.getLogger(__name__)

# Offset separating the batch sampling stream from the initialization seeds.
SAMPLING_SEED_OFFSET = 104729


class TrainingError(Exception):
    """Indicates problem with training inputs or a diverging run."""


class Phase(NamedTuple):
    """One optimization phase."""

    name: str
    epochs: int
    cdct_trainable: bool
    hyper: Regularization


class TrainingResult(NamedTuple):
    """Trained network with its per-step history and written checkpoints."""

    network: Network
    history: List[Dict[str, Any]]
    checkpoints: List[str]
    steps: int


def plan_phases(config: TrainConfig) -> List[Phase]:
    """Return the phases a variant is trained with."""
    variant = Variant(config.variant)
    hyper = Regularization(
        sigma=config.sigma,
        gamma=config.gamma if variant.orthogonality else 0.0,
        lam=config.lam if variant.complexity else 0.0,
    )
    if not variant.dct_init:
        return [Phase("main", 2 * config.epochs, True, hyper)]
    return [
        Phase("pretrain", config.epochs, False, Regularization(sigma=config.sigma)),
        Phase("main", config.epochs, variant.cdct_trainable, hyper),
    ]


class Trainer:
    """Owner of the network, optimizer state and training log of one run."""

    def __init__(
        self, config: TrainConfig, pairs: Sequence[PatchPair], net: Optional[Network] = None
    ) -> None:
        """Prepare training run.

        :raises:
            TrainingError: if there are no patch pairs to train on.
        """
        if not pairs:
            raise TrainingError("Training dataset is empty.")
        self.config = config
        self.pairs = pairs
        self.net = net if net is not None else build_network(config)
        self.rng = make_rng(config.seed + SAMPLING_SEED_OFFSET)
        self.history: List[Dict[str, Any]] = []
        self.checkpoints: List[str] = []
        self.steps = 0

    @property
    def steps_per_epoch(self) -> int:
        """Return number of batches in one pass over the patch list."""
        return int(math.ceil(len(self.pairs) / self.config.batch_size))

    def _checkpoint(self, name: str, **meta: Any) -> str:
        path = os.path.join(self.config.checkpoint_dir, name)
        save_checkpoint(path, self.net, self.config, **meta)
        self.checkpoints.append(path)
        return path

    def _log(self, log_file: Any, record: Dict[str, Any]) -> None:
        self.history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record) + "\n")

    def _step(self, phase: Phase, epoch: int, state: AdamState, log_file: Any) -> None:
        indices = self.rng.integers(0, len(self.pairs), size=self.config.batch_size)
        lr_batch, hr_batch = stack_batch(self.pairs, indices)
        breakdown, grads = loss_and_gradients(self.net, lr_batch, hr_batch)
        if not math.isfinite(breakdown.total):
            path = self._checkpoint(
                "diagnostic.ckpt", phase=phase.name, epoch=epoch, step=self.steps
            )
            logger.error("Loss diverged at step %d, diagnostic checkpoint %s.", self.steps, path)
            raise TrainingError(f"Non-finite loss at step {self.steps} ({phase.name}).")

        rate = learning_rate(self.config, epoch)
        clipped = gradient_clip(grads, self.config.clip, self.config.clip_mode)
        adam_step(self.net.parameters(phase.cdct_trainable), clipped.arrays(), state, rate)
        self.steps += 1
        record = {"phase": phase.name, "step": self.steps, "epoch": epoch + 1}
        record.update(breakdown.render())
        record["learning_rate"] = rate
        self._log(log_file, record)
        logger.debug("Step %d: total loss %.6g.", self.steps, breakdown.total)

    def run_phase(self, phase: Phase, log_file: Any = None) -> None:
        """Run all epochs of one phase with a fresh optimizer state and schedule."""
        logger.info(
            "Starting phase %s: %d epochs, trainable transform: %s.",
            phase.name,
            phase.epochs,
            phase.cdct_trainable,
        )
        self.net.hyper = phase.hyper
        self.net.cdct_trainable = phase.cdct_trainable
        if phase.cdct_trainable:
            self.net.bank = self.net.bank.copy(FilterTag.LEARNED)
        state = AdamState.from_config(self.net.parameters(phase.cdct_trainable), self.config)

        phase_steps = 0
        for epoch in range(phase.epochs):
            for _ in range(self.steps_per_epoch):
                if self.config.max_steps and phase_steps >= self.config.max_steps:
                    break
                self._step(phase, epoch, state, log_file)
                phase_steps += 1
            self._checkpoint(
                f"{phase.name}-latest.ckpt", phase=phase.name, epoch=epoch + 1, step=self.steps
            )
            logger.info("Finished epoch %d of phase %s.", epoch + 1, phase.name)
            if self.config.max_steps and phase_steps >= self.config.max_steps:
                logger.info("Step limit %d reached in phase %s.", phase_steps, phase.name)
                break

    def train(self) -> TrainingResult:
        """Run every phase of the variant and write the final checkpoint."""
        log_path = self.config.training_log
        os.makedirs(os.path.dirname(os.path.abspath(log_path)), exist_ok=True)
        with open(log_path, "a", encoding="utf-8") as log_file:
            for phase in plan_phases(self.config):
                self.run_phase(phase, log_file)
        self._checkpoint("final.ckpt", phase="final", step=self.steps)
        return TrainingResult(self.net, self.history, list(self.checkpoints), self.steps)


def train(
    config: TrainConfig, pairs: Sequence[PatchPair], net: Optional[Network] = None
) -> TrainingResult:
    """Train a network of the configured variant on patch pairs."""
    return Trainer(config, pairs, net).train()


def mean_terms(history: Sequence[Dict[str, Any]], term: str, count: int) -> np.ndarray:
    """Return mean of a logged loss term over the first and the last `count` steps."""
    values = np.array([record[term] for record in history])
    return np.array([values[:count].mean(), values[-count:].mean()])
