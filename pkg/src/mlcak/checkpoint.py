"""Binary model checkpoints.

Layout: magic b"MLCAK1", then a u32 little-endian byte length followed by the
config as UTF-8 JSON (sorted keys, canonical bytes), then every parameter in
declaration order (ViTModel.parameter_shapes order) as little-endian float64.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ParseError
from .tensor import Tensor
from .vit import ViTConfig, ViTModel

MAGIC = b"MLCAK1"


def config_to_json(config: ViTConfig) -> bytes:
    return json.dumps(dataclasses.asdict(config), sort_keys=True).encode("utf-8")


def save_checkpoint(model: ViTModel, path) -> None:
    path = Path(path)
    blob = config_to_json(model.config)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, shape in ViTModel.parameter_shapes(model.config).items():
            arr = model.params[name].data
            assert arr.shape == shape, f"parameter {name} has shape {arr.shape}, expected {shape}"
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_config(path) -> ViTConfig:
    """Config header only; validates magic and JSON without touching weights."""
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def load_checkpoint(path, expected_config: Optional[ViTConfig] = None) -> ViTModel:
    """Load a model, optionally insisting the stored config equals ``expected_config``."""
    path = Path(path)
    with open(path, "rb") as fh:
        config = _read_header(fh, path)
        if expected_config is not None and config != expected_config:
            raise ConfigError(
                f"checkpoint config mismatch at {path}: stored {config} != expected {expected_config}"
            )
        params: dict[str, Tensor] = {}
        for name, shape in ViTModel.parameter_shapes(config).items():
            count = int(np.prod(shape))
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ParseError(f"checkpoint {path} truncated while reading parameter '{name}'")
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            params[name] = Tensor(arr, requires_grad=True)
        trailing = fh.read(1)
        if trailing:
            raise ParseError(f"checkpoint {path} has trailing bytes after the last parameter")
    return ViTModel(config, params)


def _read_header(fh, path) -> ViTConfig:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ParseError(f"{path} is not a model checkpoint (bad magic {magic!r})")
    (length,) = struct.unpack("<I", fh.read(4))
    blob = fh.read(length)
    if len(blob) != length:
        raise ParseError(f"checkpoint {path} truncated inside the config header")
    try:
        fields = json.loads(blob.decode("utf-8"))
        return ViTConfig(**fields)
    except (ValueError, TypeError) as exc:
        raise ParseError(f"checkpoint {path} has an unreadable config header: {exc}") from exc
