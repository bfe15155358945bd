"""Binary PGM (P5) and PPM (P6) reading, and P5 writing.

Only 8-bit images (maxval <= 255) are supported; that is all the
synthetic datasets produce.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def _read_header_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # skip whitespace and '#' comment lines
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c in b" \t\r\n":
            pos += 1
        elif c == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < n and data[pos:pos + 1] not in b" \t\r\n":
        pos += 1
    if start == pos:
        raise FormatError("truncated PNM header")
    return data[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file into a uint8 array of shape (H, W) or (H, W, 3)."""
    data = Path(path).read_bytes()
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    channels = 1 if data[:2] == b"P5" else 3
    pos = 2
    try:
        width_tok, pos = _read_header_token(data, pos)
        height_tok, pos = _read_header_token(data, pos)
        maxval_tok, pos = _read_header_token(data, pos)
        width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
    except (ValueError, FormatError) as exc:
        raise FormatError(f"{path}: bad PNM header ({exc})") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: non-positive dimensions {width}x{height}")
    if not 0 < maxval <= 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # the single whitespace byte after maxval
    expected = width * height * channels
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise FormatError(f"{path}: expected {expected} raster bytes, got {len(raster)}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return img[:, :, 0] if channels == 1 else img


def write_pgm(path, img: np.ndarray) -> None:
    """Write a (H, W) uint8 array as binary PGM."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise FormatError(f"write_pgm expects a 2-d array, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise FormatError(f"write_pgm expects uint8 values, got {img.dtype}")
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())
