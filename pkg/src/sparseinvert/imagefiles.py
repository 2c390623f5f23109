"""Netpbm export of inversion results.

One-channel canvases go out as binary PGM (P5), three-channel as binary
PPM (P6), maxval 255. Stopped patches are written as zero pixels, the
black blocks in a sparse inversion montage.
"""

from __future__ import annotations

import numpy as np

from .data import IoError
from .invert import SparseImage


def image_bytes(image: SparseImage) -> bytes:
    arr = image.render()
    if arr.ndim != 3 or arr.shape[-1] not in (1, 3):
        raise IoError(f"cannot encode shape {arr.shape}; need (H, W, 1) or (H, W, 3)")
    h, w, c = arr.shape
    pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    magic = "P5" if c == 1 else "P6"
    header = f"{magic}\n{w} {h}\n255\n".encode()
    return header + pixels.tobytes(order="C")


def write_image(image: SparseImage, path) -> None:
    try:
        with open(path, "wb") as f:
            f.write(image_bytes(image))
    except OSError as e:
        if isinstance(e, IoError):
            raise
        raise IoError(f"cannot write {path}: {e}") from e


def _tokens(buf: bytes):
    """Header tokens per the netpbm rules: whitespace-separated, # starts
    a comment running to end of line. Yields (token, end_offset)."""
    i = 0
    n = len(buf)
    while i < n:
        ch = buf[i:i + 1]
        if ch.isspace():
            i += 1
        elif ch == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        else:
            j = i
            while j < n and not buf[j:j + 1].isspace() and buf[j:j + 1] != b"#":
                j += 1
            yield buf[i:j], j
            i = j


def parse_image(buf: bytes) -> np.ndarray:
    """Decode binary PGM/PPM bytes to a (H, W, C) uint8 array."""
    toks = _tokens(buf)
    try:
        magic, _ = next(toks)
    except StopIteration:
        raise IoError("empty image file") from None
    if magic not in (b"P5", b"P6"):
        raise IoError(f"unsupported magic {magic!r}")
    c = 1 if magic == b"P5" else 3
    vals = []
    end = 0
    try:
        for _ in range(3):
            tok, end = next(toks)
            vals.append(int(tok))
    except (StopIteration, ValueError):
        raise IoError("malformed header") from None
    w, h, maxval = vals
    if maxval != 255:
        raise IoError(f"maxval {maxval} unsupported; expected 255")
    if w < 1 or h < 1:
        raise IoError(f"bad dimensions {w}x{h}")
    # exactly one whitespace byte separates the header from the payload
    payload = buf[end + 1:]
    if len(payload) != h * w * c:
        raise IoError(f"payload is {len(payload)} bytes, expected {h * w * c}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c)


def read_image(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    return parse_image(buf)
