"""On-disk formats: MSAT tensors, binary PGM images, and JSON manifests.

MSAT layout (little-endian)::

    4D 53 41 54 | version=01 | dtype=01 (f32) | ndim=04 | u32 N C H W | f32 data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MSAT_MAGIC = b"MSAT"
MSAT_VERSION = 1
MSAT_DTYPE_F32 = 1
_HEADER = struct.Struct("<4sBBB4I")


def _as4d(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) > 4:
        raise ValueError(f"MSAT holds at most 4 axes, got shape {shape}")
    return shape + (1,) * (4 - len(shape))


def encode_msat(array):
    a = np.asarray(array)
    header = _HEADER.pack(MSAT_MAGIC, MSAT_VERSION, MSAT_DTYPE_F32, 4, *_as4d(a.shape))
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_msat(buf, path=None):
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated MSAT header ({len(buf)} bytes)", path, len(buf))
    magic, version, dtype, ndim, *dims = _HEADER.unpack_from(buf)
    if magic != MSAT_MAGIC:
        raise FormatError(f"bad MSAT magic {magic!r}", path, 0)
    if version != MSAT_VERSION:
        raise FormatError(f"unsupported MSAT version {version}", path, 4)
    if dtype != MSAT_DTYPE_F32:
        raise FormatError(f"unsupported MSAT dtype code {dtype}", path, 5)
    if ndim != 4:
        raise FormatError(f"MSAT ndim must be 4, got {ndim}", path, 6)
    count = int(np.prod(dims, dtype=np.int64))
    expected = _HEADER.size + 4 * count
    if len(buf) != expected:
        raise FormatError(f"MSAT payload is {len(buf) - _HEADER.size} bytes, expected {4 * count}",
                          path, min(len(buf), expected))
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=_HEADER.size)
    return data.reshape(dims).astype(np.float32)


def write_msat(path, array):
    Path(path).write_bytes(encode_msat(array))


def read_msat(path):
    return decode_msat(Path(path).read_bytes(), path)


# ---------------------------------------------------------------------------
# PGM (P5, 8-bit)

def encode_pgm(image):
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError("encode_pgm expects uint8 pixels; use to_uint8 first")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_pgm(buf, path=None):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", path, pos)
        tokens.append((buf[start:pos], start))
    magic, off = tokens[0]
    if magic != b"P5":
        raise FormatError(f"bad PGM magic {magic!r}", path, off)
    try:
        w, h, maxval = (int(t) for t, _ in tokens[1:])
    except ValueError:
        raise FormatError("non-integer PGM header field", path, tokens[1][1]) from None
    if maxval != 255:
        raise FormatError(f"only maxval 255 supported, got {maxval}", path, tokens[3][1])
    pos += 1  # single whitespace byte before raster
    if len(buf) - pos != w * h:
        raise FormatError(f"PGM raster has {len(buf) - pos} bytes, expected {w * h}", path, pos)
    return np.frombuffer(buf, dtype=np.uint8, offset=pos).reshape(h, w).copy()


def write_pgm(path, image):
    Path(path).write_bytes(encode_pgm(image))


def read_pgm(path):
    return decode_pgm(Path(path).read_bytes(), path)


def to_uint8(values):
    """Quantize reals in [0, 1] to 0..255."""
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------

def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.pos) from None
