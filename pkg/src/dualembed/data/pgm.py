"""Binary PGM (P5) reading and writing."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class PGMError(ValueError):
    pass


def write_pgm(path, pixels: np.ndarray, maxval: int = 65535) -> None:
    """Write integer pixels (H x W) as P5. 16-bit samples are big-endian."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise PGMError(f"PGM needs a 2-D image, got shape {pixels.shape}")
    if not 0 < maxval < 65536:
        raise PGMError(f"maxval {maxval} out of range")
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > maxval:
        raise PGMError("pixel values outside [0, maxval]")
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + pixels.astype(dtype).tobytes())


def _read_token(buf: bytes, pos: int, path) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PGMError(f"{path}: truncated header at byte {start}")
    return buf[start:pos], pos


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return (integer pixels H x W, maxval)."""
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise FileNotFoundError(f"chip file not found: {path}") from None
    magic, pos = _read_token(buf, 0, path)
    if magic != b"P5":
        raise PGMError(f"{path}: bad magic {magic!r} at byte 0, expected P5")
    fields = []
    for name in ("width", "height", "maxval"):
        tok_start = pos
        tok, pos = _read_token(buf, pos, path)
        try:
            fields.append(int(tok))
        except ValueError:
            raise PGMError(f"{path}: bad {name} {tok!r} near byte {tok_start}") from None
    w, h, maxval = fields
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise PGMError(f"{path}: invalid header values w={w} h={h} maxval={maxval}")
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    if len(buf) - pos < need:
        raise PGMError(f"{path}: raster truncated at byte {len(buf)}, expected {pos + need} bytes")
    pixels = np.frombuffer(buf, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    if pixels.max(initial=0) > maxval:
        raise PGMError(f"{path}: sample exceeds maxval {maxval}")
    return pixels.astype(np.int64), maxval


def quantize(image: np.ndarray, maxval: int = 65535) -> np.ndarray:
    return np.rint(np.clip(image, 0.0, 1.0) * maxval).astype(np.int64)


def load_normalized(path, sqrt_preprocess: bool = False) -> np.ndarray:
    """Pixels scaled to [0, 1] by the file's maxval, optionally square-rooted."""
    pixels, maxval = read_pgm(path)
    img = pixels / float(maxval)
    return np.sqrt(img) if sqrt_preprocess else img
