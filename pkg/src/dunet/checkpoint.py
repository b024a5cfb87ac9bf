"""SGW1 parameter checkpoints.

Layout (all integers little-endian u32)::

    b"SGW1" | count | count x (name_len | utf-8 name | 4 x extent | f32 LE data)

Shapes of rank < 4 are left-padded with 1s, so a bias of shape (16,) is
stored as (1, 1, 1, 16).
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SGW1"


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


def dumps(state: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        arr = np.asarray(arr)
        if arr.ndim > 4:
            raise CheckpointError(f"{name}: rank {arr.ndim} > 4")
        shape = (1,) * (4 - arr.ndim) + arr.shape
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<4I", *shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic: not an SGW1 checkpoint")
    try:
        (count,) = struct.unpack_from("<I", data, 4)
        pos = 8
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            shape = struct.unpack_from("<4I", data, pos)
            pos += 16
            nbytes = 4 * int(np.prod(shape))
            if pos + nbytes > len(data):
                raise CheckpointError(f"truncated payload for {name!r}")
            state[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4,
                                        offset=pos).reshape(shape).astype(np.float32)
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after last parameter")
    return state


def save(path: str | os.PathLike, state: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(state))
    return path


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
