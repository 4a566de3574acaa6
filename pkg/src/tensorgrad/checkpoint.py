"""The `ckpt/1` binary checkpoint format.

Layout, all integers little-endian:

    magic "RDLB" | version u32 | count u32
    count x (name length u16 | UTF-8 name | dtype tag u8 | rank u8 | rank x dim u32 | raw element data)
"""

from __future__ import annotations

import struct
from typing import TYPE_CHECKING, Any

import numpy as np
from loguru import logger

from src.errors import CheckpointMismatchError
from src.fileio import atomic_write_bytes

if TYPE_CHECKING:
    from collections.abc import Mapping
    from pathlib import Path

    from numpy.typing import NDArray

MAGIC = b"RDLB"
VERSION = 1

DTYPE_TAGS: dict[int, np.dtype[Any]] = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
}
TAG_BY_DTYPE = {dtype: tag for tag, dtype in DTYPE_TAGS.items()}


def encode_checkpoint(tensors: Mapping[str, NDArray[Any]]) -> bytes:
    """Serialize named arrays in iteration order.

    Raises:
        CheckpointMismatchError: If an array has a dtype the format cannot store.
    """
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, array in tensors.items():
        dtype = array.dtype.newbyteorder("<")
        if (tag := TAG_BY_DTYPE.get(dtype)) is None:
            msg = f"Cannot store {name!r} with dtype {array.dtype} in ckpt/{VERSION}"
            raise CheckpointMismatchError(msg)

        encoded_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded_name)))
        parts.append(encoded_name)
        parts.append(struct.pack("<BB", tag, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> dict[str, NDArray[Any]]:
    """Parse a `ckpt/1` payload back into named arrays, preserving order.

    Raises:
        CheckpointMismatchError: If the payload is not a valid `ckpt/1` document.
    """
    if data[:4] != MAGIC:
        msg = f"Not a ckpt/{VERSION} file: bad magic {data[:4]!r}"
        raise CheckpointMismatchError(msg)

    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            msg = f"Unsupported checkpoint version {version}, expected {VERSION}"
            raise CheckpointMismatchError(msg)

        offset = 12
        tensors: dict[str, NDArray[Any]] = {}
        for _ in range(count):
            (name_length,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_length].decode("utf-8")
            offset += name_length
            tag, rank = struct.unpack_from("<BB", data, offset)
            offset += 2
            shape = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank

            if (dtype := DTYPE_TAGS.get(tag)) is None:
                msg = f"Unknown dtype tag {tag} for {name!r}"
                raise CheckpointMismatchError(msg)
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + size > len(data):
                msg = f"Checkpoint truncated inside {name!r}"
                raise CheckpointMismatchError(msg)
            tensors[name] = np.frombuffer(data, dtype=dtype, count=size // dtype.itemsize, offset=offset).reshape(
                shape
            ).copy()
            offset += size
    except (struct.error, UnicodeDecodeError) as e:
        msg = f"Malformed ckpt/{VERSION} payload: {e}"
        raise CheckpointMismatchError(msg) from e

    if offset != len(data):
        msg = f"{len(data) - offset} trailing bytes after the last tensor"
        raise CheckpointMismatchError(msg)
    return tensors


def save_checkpoint(path: Path, tensors: Mapping[str, NDArray[Any]]) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors))
    logger.debug(f"Saved {len(tensors)} tensors to {path}")


def load_checkpoint(path: Path) -> dict[str, NDArray[Any]]:
    """Read a checkpoint file.

    Raises:
        FileNotFoundError: If the file does not exist.
        CheckpointMismatchError: If the file is not a valid checkpoint.
    """
    if not path.exists():
        msg = f"Checkpoint {path} not found."
        raise FileNotFoundError(msg)
    tensors = decode_checkpoint(path.read_bytes())
    logger.debug(f"Loaded {len(tensors)} tensors from {path}")
    return tensors
