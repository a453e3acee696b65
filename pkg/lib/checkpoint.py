"""
Binary checkpoint files.

Layout (all integers little-endian):
    b"DFDG" | u32 version | u32 config length | config text (UTF-8)
    u32 array count, then per array:
        u16 name length | name | u32 rank | u32 extent * rank | f64 data (C order)
"""
import logging
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from lib.errors import CheckpointError
from lib.model import ModelParams

logger = logging.getLogger(__name__)

MAGIC = b"DFDG"
VERSION = 1


def save_checkpoint(path: Union[str, Path], config_text: str, params: ModelParams) -> Path:
    """
    Write parameters and the canonical run configuration to `path`.

    Returns:
        The path written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config_bytes = config_text.encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(config_bytes)), config_bytes,
              struct.pack("<I", len(params))]
    for name, arr in params.items():
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    logger.info("Saved checkpoint with %d arrays (%d values) to %s", len(params), params.size, path)
    return path


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: Union[str, Path]) -> Tuple[str, ModelParams]:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        Tuple of (config text, parameters)
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    reader = _Reader(blob, path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    version, config_len = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        config_text = reader.take(config_len).decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"{path}: config text is not UTF-8") from e

    (count,) = reader.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"{path}: array name is not UTF-8") from e
        (rank,) = reader.unpack("<I")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64)
        if name in arrays:
            raise CheckpointError(f"{path}: array '{name}' stored twice")
        arrays[name] = data.reshape(shape)
    if reader.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - reader.pos} trailing bytes")
    logger.info("Loaded checkpoint %s (%d arrays)", path, count)
    return config_text, ModelParams(arrays)
