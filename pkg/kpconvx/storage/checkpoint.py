"""
Parameter checkpoints.

Layout (little-endian): magic ``KPXC``, u32 version, u32 config length, config JSON, u32 entry
count, then per entry u32 name length, UTF-8 name, u32 rank, rank x u32 dims and the values as
32-bit floats.
"""

import json
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np
from pydantic import ValidationError

from kpconvx.errors import SchemaError, UnsupportedFormatError
from kpconvx.models.schemas import ArchitectureConfig
from kpconvx.services.network import Model

MAGIC = b"KPXC"
VERSION = 1


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _read_exact(handle: BinaryIO, size: int, path: Path) -> bytes:
    data = handle.read(size)
    if len(data) != size:
        raise SchemaError(f"{path}: checkpoint is truncated")
    return data


def _read_u32(handle: BinaryIO, path: Path) -> int:
    return struct.unpack("<I", _read_exact(handle, 4, path))[0]


def write_archive(path: str | Path, config: dict, entries: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with path.open("wb") as handle:
        handle.write(MAGIC + _u32(VERSION) + _u32(len(blob)) + blob + _u32(len(entries)))
        for name, values in entries.items():
            encoded = name.encode("utf-8")
            values = np.ascontiguousarray(values, dtype="<f4")
            handle.write(_u32(len(encoded)) + encoded + _u32(values.ndim))
            handle.write(b"".join(_u32(d) for d in values.shape))
            handle.write(values.tobytes())


def read_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return the embedded config and the named arrays (float32)."""
    path = Path(path)
    with path.open("rb") as handle:
        if handle.read(4) != MAGIC:
            raise SchemaError(f"{path} is not a checkpoint archive")
        version = _read_u32(handle, path)
        if version != VERSION:
            raise UnsupportedFormatError(f"{path}: checkpoint version {version}, expected {VERSION}")
        try:
            config = json.loads(_read_exact(handle, _read_u32(handle, path), path))
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: malformed embedded config") from exc
        entries = {}
        for _ in range(_read_u32(handle, path)):
            name = _read_exact(handle, _read_u32(handle, path), path).decode("utf-8")
            shape = tuple(_read_u32(handle, path) for _ in range(_read_u32(handle, path)))
            size = int(np.prod(shape, dtype=np.int64))
            entries[name] = np.frombuffer(_read_exact(handle, 4 * size, path), dtype="<f4").reshape(shape).copy()
        if handle.read(1):
            raise SchemaError(f"{path}: trailing bytes after the last entry")
    return config, entries


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Store the architecture config, the parameters and the batch-norm running statistics."""
    write_archive(path, model.cfg.model_dump(mode="json"), model.state_dict())


def load_checkpoint(path: str | Path) -> Model:
    """Rebuild the model from the embedded config and load its state."""
    config, entries = read_archive(path)
    try:
        cfg = ArchitectureConfig.model_validate(config)
    except ValidationError as exc:
        raise SchemaError(f"{path}: invalid embedded architecture config: {exc}") from exc
    model = Model(cfg)
    model.load_state_dict(entries)
    return model
