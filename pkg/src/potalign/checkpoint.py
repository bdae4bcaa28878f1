"""Binary tensor container used for checkpoints and dataset exports.

Layout (all integers little-endian u32)::

    b"POTA" | version | count | count x entry
    entry = name_len | name (utf-8) | rank | dims[rank] | float64 LE payload
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import BadMagicError, TruncatedError, VersionMismatchError

MAGIC = b"POTA"
FORMAT_VERSION = 1


def save_tensors(tensors: dict[str, np.ndarray], path) -> None:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"checkpoint truncated at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_tensors(path) -> dict[str, np.ndarray]:
    r = _Reader(Path(path).read_bytes())
    if r.buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a POTA container")
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    out = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    return out


# metadata rides along as a rank-1 tensor of utf-8 byte values
META_KEY = "meta.json"


def save_checkpoint(params: dict[str, np.ndarray], path, meta: dict | None = None) -> None:
    tensors = dict(params)
    if meta is not None:
        tensors[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"),
                                          dtype=np.uint8).astype(np.float64)
    save_tensors(tensors, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    tensors = load_tensors(path)
    raw = tensors.pop(META_KEY, None)
    meta = None if raw is None else json.loads(raw.astype(np.uint8).tobytes().decode("utf-8"))
    return tensors, meta
