"""PPM P6 image reader/writer (binary, maxval 255 only)."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comments between header fields
    while pos < len(buf):
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise DataError("truncated PPM header")
    return buf[start:pos], pos


def read_ppm(path_or_bytes) -> np.ndarray:
    """Parse a P6 PPM file into u8 RGB [h, w, 3]."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        buf = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as f:
            buf = f.read()
    magic, pos = _read_token(buf, 0)
    if magic != b"P6":
        raise DataError(f"not a P6 PPM file (magic {magic!r})")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise DataError(f"bad PPM header field {tok!r}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"unsupported PPM maxval {maxval} (only 255)")
    if w < 1 or h < 1:
        raise DataError(f"empty PPM image {w}x{h}")
    pos += 1  # single whitespace byte after maxval
    need = w * h * 3
    pixels = buf[pos : pos + need]
    if len(pixels) != need:
        raise DataError(f"PPM payload truncated: {len(pixels)} of {need} bytes")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise DataError(f"expected u8 RGB [h, w, 3], got {pixels.shape}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(pixels.tobytes())
