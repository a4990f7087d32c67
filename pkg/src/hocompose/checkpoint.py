"""Binary checkpoint container for named float64 arrays.

Layout (all integers little-endian u32, float data little-endian f64):

    magic  b"NCHO"
    version u32
    count   u32
    per entry:
        name_len u32, name utf-8 bytes,
        rank u32, dims u32 * rank,
        data f64 * prod(dims)

Round trips are bit-exact: load(save(x)) == x byte for byte.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"NCHO"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, arrays: dict) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
            fh.write(a.tobytes())


def load_checkpoint(path) -> dict:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    off = 4
    version, count = struct.unpack_from("<II", raw, off)
    off += 8
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        arrays[name] = arr.copy()
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays
