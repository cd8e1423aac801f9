"""Binary "TEGU" checkpoint container shared by backbone and projector.

Layout (all integers little-endian)::

    b"TEGU" | u32 version | u64 len | JSON header (utf-8)
    repeated: u32 len | name (utf-8) | u32 rank | u64 extent * rank | f32 data

The JSON header is ``{"component": ..., "config": {...}}``. Parameter values
are stored as float32 and widened back to float64 on load.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TEGU"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict, component: str) -> None:
    header = json.dumps({"component": component, "config": config}, sort_keys=True).encode()
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(header)), header]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f4")
        encoded = name.encode()
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: wanted {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def done(self) -> bool:
        return self.pos == len(self.data)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, str]:
    """Returns ``(params, config, component)``."""
    r = _Reader(Path(path).read_bytes())
    if len(r.data) < 4:
        raise TruncatedCheckpointError("checkpoint shorter than its magic number")
    magic = r.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this reader supports {VERSION}")
    (hlen,) = r.unpack("<Q")
    try:
        header = json.loads(r.take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    params = {}
    while not r.done:
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        raw = r.take(4 * count)
        params[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    return params, header["config"], header["component"]
