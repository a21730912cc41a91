#!/usr/bin/env python3
# Copyright 2022 Canonical Ltd.
# See LICENSE file for licensing details.

"""Binary containers for filter banks, DCT cubes and network checkpoints.

All containers are little-endian and start with 8 magic bytes. Banks and cubes
use a fixed struct header; checkpoints carry a JSON header (format version,
effective configuration, tensor table) followed by the raw tensors in declared
order. Files are written atomically (temporary file, then rename).
"""
import json
import logging
import os
import struct
import tempfile
from typing import Any, Dict, List, NamedTuple, Tuple

import numpy as np
from packaging import version

from cdct import DctCube
from config import TrainConfig
from network import ConvLayer, Network, Regularization, Variant
from transform import FilterBank, FilterTag, TransformError

logger = logging.getLogger(__name__)

BANK_MAGIC = b"CDCTBANK"
CUBE_MAGIC = b"CDCTCUBE"
CHECKPOINT_MAGIC = b"CDCTCKPT"
FORMAT_VERSION = "1.0"

BANK_HEADER = struct.Struct("<8sHIB16s")
CUBE_HEADER = struct.Struct("<8sHIIIIIB")
CHECKPOINT_HEADER = struct.Struct("<8sI")

_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODE_BY_DTYPE = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class ContainerError(Exception):
    """Indicates problem with reading or writing binary containers."""


class Checkpoint(NamedTuple):
    """Network restored from a checkpoint together with its metadata."""

    network: Network
    config: TrainConfig
    header: Dict[str, Any]


def _dtype_code(dtype: np.dtype) -> int:
    try:
        return _CODE_BY_DTYPE[np.dtype(dtype)]
    except KeyError as exc:
        raise ContainerError(f"Unsupported dtype {dtype}.") from exc


def _little_endian(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes()


def atomic_write(path: str, payload: bytes) -> None:
    """Write payload to path through a temporary file in the same directory.

    :raises:
        ContainerError: if the file cannot be written.
    """
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=directory, delete=False, suffix=".tmp") as tmp:
            tmp.write(payload)
            temp_path = tmp.name
        os.replace(temp_path, path)
    except OSError as exc:
        raise ContainerError(f"Failed to write {path}: {exc}") from exc
    logger.debug("Wrote %d bytes to %s.", len(payload), path)


def _read(path: str) -> bytes:
    try:
        with open(path, "rb") as container:
            return container.read()
    except OSError as exc:
        raise ContainerError(f"Failed to read {path}: {exc}") from exc


def _unpack_header(header: struct.Struct, data: bytes, magic: bytes, path: str) -> Tuple:
    if len(data) < header.size or data[:8] != magic:
        raise ContainerError(f"{path} is not a {magic.decode()} container.")
    return header.unpack_from(data)


def _payload(data: bytes, offset: int, shape: Tuple[int, ...], dtype: np.dtype) -> np.ndarray:
    count = int(np.prod(shape))
    if len(data) < offset + count * dtype.itemsize:
        raise ContainerError("Container payload is truncated.")
    array = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return array.reshape(shape).astype(dtype.newbyteorder("="))


def save_bank(path: str, bank: FilterBank) -> None:
    """Write filter bank: magic, format revision, n, dtype code, tag, N^2 row-major filters."""
    header = BANK_HEADER.pack(
        BANK_MAGIC, 1, bank.n, _dtype_code(bank.weights.dtype), bank.tag.value.encode()
    )
    atomic_write(path, header + _little_endian(bank.weights))


def load_bank(path: str) -> FilterBank:
    """Read filter bank written by :func:`save_bank`.

    :raises:
        ContainerError: if the file is not a bank container or its content is invalid.
    """
    data = _read(path)
    _, _, n, code, tag = _unpack_header(BANK_HEADER, data, BANK_MAGIC, path)
    if code not in _DTYPE_CODES:
        raise ContainerError(f"Unknown dtype code {code} in {path}.")
    weights = _payload(data, BANK_HEADER.size, (n * n, n, n), _DTYPE_CODES[code])
    try:
        return FilterBank(weights, FilterTag(tag.rstrip(b"\0").decode()))
    except (TransformError, ValueError) as exc:
        raise ContainerError(f"Invalid filter bank in {path}: {exc}") from exc


def bank_to_json(bank: FilterBank) -> str:
    """Return bank as JSON for inspection."""
    return json.dumps(
        {
            "n": bank.n,
            "tag": bank.tag.value,
            "dtype": str(bank.weights.dtype),
            "filters": bank.weights.tolist(),
        }
    )


def save_cube(path: str, cube: DctCube) -> None:
    """Write DCT cube: header (n, S, T, H, W, dtype code), maps in index order."""
    header = CUBE_HEADER.pack(
        CUBE_MAGIC,
        1,
        cube.n,
        cube.stride,
        cube.threshold,
        cube.height,
        cube.width,
        _dtype_code(cube.maps.dtype),
    )
    atomic_write(path, header + _little_endian(cube.maps))


def load_cube(path: str) -> DctCube:
    """Read DCT cube written by :func:`save_cube`.

    :raises:
        ContainerError: if the file is not a cube container.
    """
    data = _read(path)
    _, _, n, stride, threshold, height, width, code = _unpack_header(
        CUBE_HEADER, data, CUBE_MAGIC, path
    )
    if code not in _DTYPE_CODES or stride == 0:
        raise ContainerError(f"Corrupted cube header in {path}.")
    shape = (n * n, height // stride, width // stride)
    maps = _payload(data, CUBE_HEADER.size, shape, _DTYPE_CODES[code])
    return DctCube(maps, stride, height, width, threshold)


def _tensors(net: Network) -> List[Tuple[str, np.ndarray]]:
    return list(zip(net.parameter_names(), net.parameters()))


def save_checkpoint(path: str, net: Network, config: TrainConfig, **meta: Any) -> None:
    """Write network checkpoint atomically.

    :param meta: extra JSON-serializable metadata (phase, epoch, step, ...)
    """
    tensors = _tensors(net)
    header = {
        "format_version": FORMAT_VERSION,
        "variant": net.variant.value,
        "threshold": net.threshold,
        "stride": net.stride,
        "final_relu": net.final_relu,
        "relu": [layer.relu for layer in net.layers],
        "hyper": net.hyper._asdict(),
        "bank_tag": net.bank.tag.value,
        "config": config._asdict(),
        "meta": meta,
        "tensors": [
            {"name": name, "shape": list(array.shape), "dtype": array.dtype.str.lstrip("<>=|")}
            for name, array in tensors
        ],
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(_little_endian(array) for _, array in tensors)
    atomic_write(path, CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, len(encoded)) + encoded + payload)
    logger.info("Checkpoint written to %s.", path)


def _check_version(header: Dict[str, Any], path: str) -> None:
    try:
        found = version.parse(str(header["format_version"]))
    except (KeyError, version.InvalidVersion) as exc:
        raise ContainerError(f"Checkpoint {path} has no valid format version.") from exc
    if found.major > version.parse(FORMAT_VERSION).major:
        raise ContainerError(
            f"Checkpoint {path} has format version {found}, newer than supported "
            f"{FORMAT_VERSION}."
        )


def read_checkpoint_header(path: str) -> Tuple[Dict[str, Any], bytes, int]:
    """Return (JSON header, raw file content, payload offset) of a checkpoint.

    :raises:
        ContainerError: if the file is not a checkpoint or its version is unsupported.
    """
    data = _read(path)
    _, length = _unpack_header(CHECKPOINT_HEADER, data, CHECKPOINT_MAGIC, path)
    start = CHECKPOINT_HEADER.size
    try:
        header = json.loads(data[start : start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"Checkpoint {path} has a corrupted header.") from exc
    _check_version(header, path)
    return header, data, start + length


def load_checkpoint(path: str) -> Checkpoint:
    """Restore network and configuration from a checkpoint.

    :raises:
        ContainerError: if the file is unreadable, corrupted or of a newer format.
    """
    header, data, offset = read_checkpoint_header(path)
    arrays: Dict[str, np.ndarray] = {}
    for tensor in header["tensors"]:
        dtype = np.dtype(tensor["dtype"]).newbyteorder("<")
        shape = tuple(tensor["shape"])
        arrays[tensor["name"]] = _payload(data, offset, shape, dtype)
        offset += int(np.prod(shape)) * dtype.itemsize

    try:
        config = TrainConfig(**header["config"])
        bank = FilterBank(arrays["bank"], FilterTag(header["bank_tag"]))
        layers = [
            ConvLayer(arrays[f"layer{i}.weights"], arrays[f"layer{i}.biases"], relu)
            for i, relu in enumerate(header["relu"], start=1)
        ]
        net = Network(
            bank,
            layers,
            header["threshold"],
            header["stride"],
            Variant(header["variant"]),
            Regularization(**header["hyper"]),
            header["final_relu"],
        )
    except Exception as exc:  # pylint: disable=broad-except
        raise ContainerError(f"Checkpoint {path} cannot be restored: {exc}") from exc
    return Checkpoint(net, config, header)
