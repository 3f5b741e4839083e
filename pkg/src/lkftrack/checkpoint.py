"""Versioned binary checkpoint files.

Layout (all integers little-endian):

    magic   4 bytes   b"LKFT"
    version u32       currently 1
    count   u32       number of tensors
    then per tensor, in table order:
        name_len u16, name utf-8 bytes
        ndim     u8,  dims u32 * ndim
        data     float64 little-endian, C order

Round-trips are exact: float64 payloads are written raw.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .nn import Parameters

MAGIC = b"LKFT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dump_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8", copy=False).tobytes())
    return b"".join(chunks)


def parse_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
        offset += 8 * n
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = data.reshape(shape).astype(np.float64)
    if offset != len(blob):
        raise CheckpointError("trailing bytes after tensor table")
    return tensors


def save_parameters(params: Parameters, path) -> None:
    Path(path).write_bytes(dump_tensors(params.copy_values()))


def load_tensor_table(path) -> dict[str, np.ndarray]:
    return parse_tensors(Path(path).read_bytes())
