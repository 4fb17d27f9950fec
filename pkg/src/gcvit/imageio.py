"""Binary PPM (P6) input and PGM (P5) heatmap output.

Pixels map to model inputs linearly: 0 -> -1.0 and maxval -> +1.0.
"""

from __future__ import annotations

import os

import numpy as np

from gcvit.errors import FormatError


def _tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` whitespace-separated header integers, skipping # comments."""
    out, i, n = [], 0, len(buf)
    while len(out) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and buf[j:j + 1].isdigit():
            j += 1
        if j == i:
            raise FormatError("malformed PPM header")
        out.append(int(buf[i:j]))
        i = j
    if i >= n or not buf[i:i + 1].isspace():
        raise FormatError("malformed PPM header: missing separator before pixel data")
    return out, i + 1


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Load a binary PPM as a (3, H, W) float64 array in [-1, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {buf[:2]!r}, expected b'P6')")
    (W, H, maxval), start = _tokens(buf[2:], 3)
    start += 2
    if W < 1 or H < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: invalid PPM header values {W}x{H} maxval {maxval}")
    dt = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = W * H * 3 * dt.itemsize
    if len(buf) - start != need:
        raise FormatError(f"{path}: expected {need} pixel bytes, found {len(buf) - start}")
    px = np.frombuffer(buf, dtype=dt, offset=start).reshape(H, W, 3).astype(np.float64)
    if px.max(initial=0) > maxval:
        raise FormatError(f"{path}: sample exceeds maxval {maxval}")
    return px.transpose(2, 0, 1) * (2.0 / maxval) - 1.0


def to_bytes(image: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8, rounding half to even."""
    return np.clip(np.rint((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a (3, H, W) array in [-1, 1] as an 8-bit binary PPM."""
    px = to_bytes(image)
    H, W = px.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (W, H))
        fh.write(np.ascontiguousarray(px).tobytes())


def write_pgm(path: str | os.PathLike, heat: np.ndarray) -> None:
    """Write an (H, W) map in [0, 1] as an 8-bit binary PGM."""
    heat = np.asarray(heat, dtype=np.float64)
    if heat.ndim != 2:
        raise FormatError(f"PGM needs a 2-D map, got shape {heat.shape}")
    px = np.clip(np.rint(heat * 255.0), 0, 255).astype(np.uint8)
    H, W = px.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (W, H))
        fh.write(px.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit binary PGM as an (H, W) uint8 array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    (W, H, maxval), start = _tokens(buf[2:], 3)
    start += 2
    if maxval != 255 or len(buf) - start != W * H:
        raise FormatError(f"{path}: unsupported or truncated PGM")
    return np.frombuffer(buf, dtype=np.uint8, offset=start).reshape(H, W).copy()
