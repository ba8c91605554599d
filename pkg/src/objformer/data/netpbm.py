"""Binary PPM (P6) and PGM (P5) reading and writing.

Samples wider than 8 bits (maxval > 255) are stored big-endian, as the
Netpbm format requires.
"""

from __future__ import annotations

import os
from typing import Union

import numpy as np

PathLike = Union[str, os.PathLike]

_WS = b" \t\n\r\v\f"


class NetpbmError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


def _token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c in _WS:
            pos += 1
        else:
            break
    start = pos
    while pos < n and buf[pos : pos + 1] not in _WS and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise NetpbmError("truncated header", start)
    return buf[start:pos], pos


def decode(buf: bytes) -> np.ndarray:
    """Parse P5/P6 bytes into (H, W) or (H, W, 3); uint8 or uint16."""
    if len(buf) < 2:
        raise NetpbmError("truncated magic number", len(buf))
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r}", 0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        tok, end = _token(buf, pos)
        if not tok.isdigit():
            raise NetpbmError(f"bad {name} {tok!r}", pos)
        fields.append(int(tok))
        pos = end
    width, height, maxval = fields
    if not 0 < maxval < 65536:
        raise NetpbmError(f"maxval {maxval} out of range", pos)
    if pos >= len(buf) or buf[pos : pos + 1] not in _WS:
        raise NetpbmError("missing whitespace after header", pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * channels * dtype.itemsize
    have = len(buf) - pos
    if have < need:
        raise NetpbmError(f"truncated raster: need {need} bytes, have {have}", len(buf))
    arr = np.frombuffer(buf, dtype=dtype, count=width * height * channels, offset=pos)
    arr = arr.astype(np.uint16 if maxval > 255 else np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape)


def encode(arr: np.ndarray, maxval: int | None = None) -> bytes:
    a = np.asarray(arr)
    if a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    elif a.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot encode array of shape {a.shape}")
    if maxval is None:
        maxval = 255 if a.dtype == np.uint8 or (a.size and a.max() <= 255) else 65535
    if a.size and (a.min() < 0 or a.max() > maxval):
        raise ValueError(f"values outside [0, {maxval}]")
    h, w = a.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    body = a.astype(">u2" if maxval > 255 else "u1").tobytes()
    return header + body


def read(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return decode(f.read())


def write(path: PathLike, arr: np.ndarray, maxval: int | None = None) -> None:
    with open(path, "wb") as f:
        f.write(encode(arr, maxval))
