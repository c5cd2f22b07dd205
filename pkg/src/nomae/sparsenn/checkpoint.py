"""Versioned little-endian checkpoint format.

Layout::

    b"NOMAEckpt"  u32 version  u32 tensor_count
    per tensor:   u32 name_len, name (utf-8), u8 dtype_tag, u32 rank,
                  u64 dims[rank], payload (little-endian, C order)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"NOMAEckpt"
VERSION = 1

_TAGS = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("<i4"),
    4: np.dtype("u1"),
}
_TAG_OF = {np.dtype(v).newbyteorder("=").str: k for k, v in _TAGS.items()}
_TAG_OF.update({v.str: k for k, v in _TAGS.items()})


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr)
        tag = _TAG_OF.get(a.dtype.str)
        if tag is None:
            raise FormatError(f"unsupported dtype {a.dtype} for {name!r}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BI", tag, a.ndim))
        out.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(np.ascontiguousarray(a, dtype=_TAGS[tag]).tobytes())
    return b"".join(out)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise FormatError("not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in _TAGS:
            raise FormatError(f"unknown dtype tag {tag}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = _TAGS[tag]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="), copy=True)
    if pos != len(blob):
        raise FormatError("trailing bytes after last tensor")
    return tensors


def save(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
