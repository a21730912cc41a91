#!/usr/bin/env python3
# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.

"""Training configuration helper.

Module focused on building, loading and validating the configuration shared by
training, inference and analysis.
"""
import logging
import os
from typing import Any, Dict, Mapping, NamedTuple, Optional

import yaml

logger = logging.getLogger(__name__)

VARIANTS = ("ORDSR", "DSR-OC", "DSR-CC", "DSR-UC", "DCT-DSR", "ORDSR-RI")

# Threshold T per scale factor for N=8.
DEFAULT_THRESHOLDS = {2: 5, 3: 4, 4: 3}

PRESETS: Dict[str, Dict[str, Any]] = {
    "standard": {},
    "desk": {
        "depth": 5,
        "filters": 16,
        "epochs": 20,
        "batch_size": 16,
        "dtype": "float32",
    },
}


class ConfigError(Exception):
    """Indicates problem with training configuration."""


class TrainConfig(NamedTuple):
    """Data class that holds every hyperparameter and design knob of a run."""

    scale: int = 3
    threshold: Optional[int] = None
    block_size: int = 8
    stride: int = 2
    depth: int = 15
    filters: int = 64
    first_kernel: int = 5
    kernel: int = 3
    final_relu: bool = True
    variant: str = "ORDSR"
    learning_rate: float = 1e-4
    lr_decay: float = 0.75
    lr_decay_epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip: float = 0.5
    clip_mode: str = "value"
    gamma: float = 3.5
    lam: float = 0.75
    sigma: float = 1e-4
    batch_size: int = 128
    patch_size: int = 40
    patch_overlap: int = 10
    epochs: int = 80
    max_steps: int = 0
    augment: bool = True
    train_fraction: float = 1.0
    seed: int = 0
    dtype: str = "float32"
    checkpoint_dir: str = "checkpoints"
    log_path: str = ""

    @property
    def t(self) -> int:
        """Return effective threshold T.

        Explicit `threshold` wins; otherwise T follows the scale factor (5, 4, 3 for
        c = 2, 3, 4) when N = 8, and is 0 for other block sizes.
        """
        if self.threshold is not None:
            return self.threshold
        if self.block_size == 8:
            return DEFAULT_THRESHOLDS.get(self.scale, 0)
        return 0

    @property
    def training_log(self) -> str:
        """Return path of the line-delimited JSON training log."""
        return self.log_path or os.path.join(self.checkpoint_dir, "train.jsonl")

    def render(self) -> Dict[str, Any]:
        """Return dict keyed by config-file option names."""
        fields = self._asdict()
        return {option: fields[field] for option, field in CONFIG_OPTION_MAP.items()}


# Mapping between config-file options and TrainConfig fields
CONFIG_OPTION_MAP = {
    "scale": "scale",
    "threshold": "threshold",
    "block-size": "block_size",
    "stride": "stride",
    "depth": "depth",
    "filters": "filters",
    "first-kernel": "first_kernel",
    "kernel": "kernel",
    "final-relu": "final_relu",
    "variant": "variant",
    "learning-rate": "learning_rate",
    "lr-decay": "lr_decay",
    "lr-decay-epochs": "lr_decay_epochs",
    "beta1": "beta1",
    "beta2": "beta2",
    "epsilon": "epsilon",
    "clip": "clip",
    "clip-mode": "clip_mode",
    "gamma": "gamma",
    "lambda": "lam",
    "sigma": "sigma",
    "batch-size": "batch_size",
    "patch-size": "patch_size",
    "patch-overlap": "patch_overlap",
    "epochs": "epochs",
    "max-steps": "max_steps",
    "augment": "augment",
    "train-fraction": "train_fraction",
    "seed": "seed",
    "dtype": "dtype",
    "checkpoint-dir": "checkpoint_dir",
    "log-path": "log_path",
}


def _validate_positive(config: TrainConfig) -> str:
    """Validate options that must be strictly positive."""
    errors = ""
    for field in (
        "block_size",
        "stride",
        "depth",
        "filters",
        "first_kernel",
        "kernel",
        "learning_rate",
        "lr_decay",
        "lr_decay_epochs",
        "epsilon",
        "clip",
        "batch_size",
        "patch_size",
        "epochs",
        "train_fraction",
    ):
        if getattr(config, field) <= 0:
            errors += f"Configuration option '{field}' must be a positive number.{os.linesep}"
    for field in ("gamma", "lam", "sigma", "max_steps", "patch_overlap"):
        if getattr(config, field) < 0:
            errors += f"Configuration option '{field}' must not be negative.{os.linesep}"
    return errors


def _validate_option_values(config: TrainConfig) -> str:
    """Validate sane values and combinations of options where its feasible."""
    errors = ""
    if config.scale not in DEFAULT_THRESHOLDS:
        errors += f"Scale factor {config.scale} is not one of 2, 3, 4.{os.linesep}"
    if config.block_size > 0 and config.stride > 0 and config.block_size % config.stride:
        errors += (
            f"Stride {config.stride} does not divide block size {config.block_size}.{os.linesep}"
        )
    if not 0 <= config.t <= config.block_size**2:
        errors += (
            f"Threshold {config.t} must lie in [0, {config.block_size**2}].{os.linesep}"
        )
    if config.patch_size < config.block_size:
        errors += (
            f"Patch size {config.patch_size} is smaller than block size "
            f"{config.block_size}.{os.linesep}"
        )
    if config.stride > 0 and config.patch_size % config.stride:
        errors += (
            f"Patch size {config.patch_size} is not a multiple of stride "
            f"{config.stride}.{os.linesep}"
        )
    if config.patch_overlap >= config.patch_size:
        errors += f"Patch overlap must be smaller than patch size.{os.linesep}"
    for field in ("first_kernel", "kernel"):
        if getattr(config, field) % 2 == 0:
            errors += f"Configuration option '{field}' must be an odd number.{os.linesep}"
    if config.variant not in VARIANTS:
        errors += (
            f"Variant '{config.variant}' is not one of {', '.join(VARIANTS)}.{os.linesep}"
        )
    if config.dtype not in ("float32", "float64"):
        errors += f"Configuration option 'dtype' must be float32 or float64.{os.linesep}"
    if config.clip_mode not in ("value", "norm"):
        errors += f"Configuration option 'clip_mode' must be value or norm.{os.linesep}"
    if config.train_fraction > 1:
        errors += f"Configuration option 'train_fraction' must not exceed 1.{os.linesep}"
    for field in ("beta1", "beta2"):
        if not 0 <= getattr(config, field) < 1:
            errors += f"Configuration option '{field}' must lie in [0, 1).{os.linesep}"
    return errors


def validate_config(config: TrainConfig) -> None:
    """Validate training configuration.

    :param config: configuration to be validated
    :raises:
        ConfigError: In case the config does not pass the validation process, listing
            every problem found.
    """
    errors = _validate_positive(config) + _validate_option_values(config)
    if errors:
        # Replace field names with their config-file equivalents
        for option, field in CONFIG_OPTION_MAP.items():
            errors = errors.replace(f"'{field}'", f"'{option}'")
        raise ConfigError(errors)


def options_to_fields(options: Mapping[str, Any]) -> Dict[str, Any]:
    """Translate config-file option names (or field names) to TrainConfig fields.

    :raises:
        ConfigError: if an option is unknown.
    """
    fields = {}
    known_fields = set(TrainConfig._fields)
    unknown = []
    for name, value in options.items():
        if name in CONFIG_OPTION_MAP:
            fields[CONFIG_OPTION_MAP[name]] = value
        elif name in known_fields:
            fields[name] = value
        else:
            unknown.append(name)
    if unknown:
        raise ConfigError(f"Unknown configuration options: {', '.join(sorted(unknown))}")
    return fields


def read_config_file(path: str) -> Dict[str, Any]:
    """Read YAML config file and return its options as TrainConfig fields.

    Both a flat mapping and the documented `options: {name: {default: ...}}` schema
    are accepted.
    """
    try:
        with open(path, "r", encoding="utf-8") as config_file:
            content = yaml.safe_load(config_file) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"Failed to read config file {path}: {exc}") from exc

    if not isinstance(content, dict):
        raise ConfigError(f"Config file {path} does not contain a mapping.")
    if "options" in content:
        content = {
            name: spec.get("default") if isinstance(spec, dict) else spec
            for name, spec in content["options"].items()
        }
    return options_to_fields(content)


TRUE_STRINGS = ("true", "yes", "on", "1")
FALSE_STRINGS = ("false", "no", "off", "0")


def _cast_option(name: str, value: Any, default: Any) -> Any:
    """Cast an option value to the type of its default.

    :raises:
        ConfigError: if the value does not parse as that type.
    """
    option = next(key for key, field in CONFIG_OPTION_MAP.items() if field == name)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in TRUE_STRINGS:
            return True
        if text in FALSE_STRINGS:
            return False
        raise ConfigError(f"Configuration option '{option}' must be a boolean, got {value!r}.")
    # threshold defaults to None and is an integer when set
    kind = int if default is None else type(default)
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(
            f"Configuration option '{option}' must be of type {kind.__name__}, got {value!r}."
        ) from exc


def load_config(
    path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> TrainConfig:
    """Build effective configuration.

    Precedence: overrides (CLI flags) > config file > preset > built-in defaults.

    :raises:
        ConfigError: if the preset is unknown or the resulting config is invalid.
    """
    fields: Dict[str, Any] = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"Unknown preset '{preset}', expected one of {', '.join(PRESETS)}")
        fields.update(PRESETS[preset])
    if path:
        logger.info("Loading configuration from %s.", path)
        fields.update(read_config_file(path))
    if overrides:
        fields.update(options_to_fields({k: v for k, v in overrides.items() if v is not None}))

    defaults = TrainConfig()._asdict()
    for name, value in fields.items():
        if value is not None and not isinstance(defaults[name], str):
            fields[name] = _cast_option(name, value, defaults[name])

    config = TrainConfig(**fields)
    validate_config(config)
    return config
