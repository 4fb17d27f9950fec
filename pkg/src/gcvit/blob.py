"""GCVT binary container for named arrays.

Layout (all integers little-endian)::

    b"GCVT"  u32 version  u32 record_count
    repeated record_count times:
        u32 name_len  name (UTF-8)
        u32 rank  u64 extents[rank]
        u8 dtype_tag  payload (row-major, little-endian)

dtype tags: 0 = float64, 1 = float32 (storage only), 2 = uint8 (opaque bytes,
used for embedded JSON metadata).
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from gcvit.errors import FormatError

MAGIC = b"GCVT"
VERSION = 1

_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
_TAG_OF = {"float64": 0, "float32": 1, "uint8": 2}


def _tag_for(arr: np.ndarray, storage: str) -> int:
    if arr.dtype == np.uint8:
        return 2
    return _TAG_OF[storage]


def write_blob(path: str | os.PathLike, arrays: Mapping[str, np.ndarray],
               storage: str = "float64") -> None:
    """Write ``arrays`` in iteration order. Float arrays are stored as ``storage``."""
    if storage not in ("float64", "float32"):
        raise ValueError(f"unsupported storage dtype {storage!r}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            tag = _tag_for(arr, storage)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(struct.pack("<B", tag))
            fh.write(np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes(order="C"))


class _Reader:
    def __init__(self, fh):
        self.fh = fh

    def take(self, n: int, what: str) -> bytes:
        chunk = self.fh.read(n)
        if len(chunk) != n:
            raise FormatError(f"truncated file while reading {what}")
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dt: np.dtype, count: int, what: str) -> np.ndarray:
        arr = np.fromfile(self.fh, dtype=dt, count=count)
        if arr.size != count:
            raise FormatError(f"truncated file while reading {what}")
        return arr


def read_blob(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read every record; float payloads come back as float64."""
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        r = _Reader(fh)
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
        (version,) = r.unpack("<I", "version")
        if version != VERSION:
            raise FormatError(f"unsupported format version {version}, expected {VERSION}")
        (count,) = r.unpack("<I", "record count")
        for i in range(count):
            (nlen,) = r.unpack("<I", f"name length of record {i}")
            try:
                name = r.take(nlen, f"name of record {i}").decode("utf-8")
            except UnicodeDecodeError:
                raise FormatError(f"record {i} name is not valid UTF-8") from None
            (rank,) = r.unpack("<I", f"rank of {name!r}")
            shape = r.unpack(f"<{rank}Q", f"extents of {name!r}")
            (tag,) = r.unpack("<B", f"dtype tag of {name!r}")
            if tag not in _TAGS:
                raise FormatError(f"unknown dtype tag {tag} for {name!r}")
            n = int(np.prod(shape)) if rank else 1
            arr = r.array(_TAGS[tag], n, f"payload of {name!r}").reshape(shape)
            if tag != 2:
                arr = arr.astype(np.float64, copy=False)
            out[name] = arr
        if fh.read(1):
            raise FormatError("trailing bytes after last record")
    return out
