"""Checkpoint file format.

Layout: magic b"MNET", format version u16, record count u32, then per
record: name length u16 + UTF-8 name, rank u32, dims u32 each (all
little-endian), raw little-endian float payload.

Version 1 stores float32 payloads and is the portable model-export format;
round-trips are lossless at 32-bit precision. Version 2 stores float64 and
is used for training checkpoints, where bit-exact resume requires full
precision.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "MAGIC"]

MAGIC = b"MNET"
_DTYPES = {1: "<f4", 2: "<f8"}


def save_checkpoint(path, records: dict[str, np.ndarray], version: int = 1) -> None:
    """Write named arrays; insertion order of `records` is preserved."""
    if version not in _DTYPES:
        raise ValueError(f"unsupported checkpoint version {version}")
    dtype = _DTYPES[version]
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", version, len(records)))
        for name, arr in records.items():
            arr = np.asarray(arr)
            enc = name.encode()
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], int]:
    """Read a checkpoint; returns (records, version). Arrays come back as
    float64 (version-1 values pass through float32 exactly)."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<HI", data, 4)
    if version not in _DTYPES:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    dtype = np.dtype(_DTYPES[version])
    off = 10
    records: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=off).reshape(dims)
        off += n * dtype.itemsize
        records[name] = arr.astype(np.float64)
    return records, version
