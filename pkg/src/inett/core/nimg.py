"""NIMG tensor files and 8-bit binary PGM images."""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"NIMG"
VERSION = 1


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


def encode(array) -> bytes:
    a = np.ascontiguousarray(array, dtype="<f8")
    if a.ndim > 255:
        raise ValueError("too many dimensions for NIMG")
    head = MAGIC + struct.pack("<BB", VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def decode_from(buf: bytes, offset: int = 0):
    """Parse one NIMG tensor from ``buf``; returns ``(array, end_offset)``."""
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError(f"bad magic {buf[offset:offset + 4]!r}, expected {MAGIC!r}", offset)
    if len(buf) < offset + 6:
        raise FormatError("truncated header", len(buf))
    version, ndim = buf[offset + 4], buf[offset + 5]
    if version != VERSION:
        raise FormatError(f"unsupported NIMG version {version}", offset + 4)
    pos = offset + 6
    if len(buf) < pos + 4 * ndim:
        raise FormatError("truncated dimension list", len(buf))
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = int(np.prod(dims)) if ndim else 1
    end = pos + 8 * count
    if len(buf) < end:
        raise FormatError(f"expected {count} float64 values, data truncated", len(buf))
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return data.reshape(dims), end


def save(path, array) -> None:
    Path(path).write_bytes(encode(array))


def load(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    array, end = decode_from(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor data", end)
    return array


def write_to(stream: BinaryIO, array) -> None:
    stream.write(encode(array))


# ---------------------------------------------------------------- PGM


def save_pgm(path, image, lo=None, hi=None) -> None:
    """Write a 2-D image as binary P5, mapping ``[lo, hi]`` linearly onto 0..255."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 1:
        img = img[..., 0]
    if img.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D image, got shape {img.shape}")
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    q = np.clip(np.rint((img - lo) * scale), 0, 255).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def _pgm_token(buf, pos):
    n = len(buf)
    while pos < n:
        if buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos : pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of PGM header", pos)
    tok = buf[start:pos]
    if not tok.isdigit():
        raise FormatError(f"expected an integer in PGM header, got {tok!r}", start)
    return int(tok), pos


def load_pgm(path) -> np.ndarray:
    """Read an 8-bit binary PGM, scaling values by ``1 / maxval``."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError(f"bad magic {buf[:2]!r}, expected b'P5'", 0)
    width, pos = _pgm_token(buf, 2)
    height, pos = _pgm_token(buf, pos)
    maxval, pos = _pgm_token(buf, pos)
    if not 0 < maxval < 256:
        raise FormatError(f"only 8-bit PGM supported, maxval={maxval}", pos)
    pos += 1  # single whitespace before raster
    end = pos + width * height
    if len(buf) < end:
        raise FormatError(f"raster truncated, need {width * height} bytes", len(buf))
    raster = np.frombuffer(buf, dtype=np.uint8, count=width * height, offset=pos)
    return raster.reshape(height, width).astype(np.float64) / maxval
