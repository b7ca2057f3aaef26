"""Binary netpbm (PGM P5 / PPM P6, maxval 255) reading and writing."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


def as_image(arr):
    """Return ``arr`` as a float64 ``(h, w, c)`` array, checking the [0, 1] range."""
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ImageFormatError(f"expected an (h, w[, c]) image, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
        raise ImageFormatError("pixel values must lie in [0, 1]")
    return img


def _tokens(data):
    """Yield header tokens and the offset just past each one, skipping comments."""
    pos = 0
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            start = pos
            while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
                pos += 1
            yield data[start:pos], pos


def read_netpbm(path):
    """Read a P5/P6 file into a float ``(h, w, c)`` array scaled to [0, 1]."""
    data = Path(path).read_bytes()
    toks = _tokens(data)
    try:
        magic, _ = next(toks)
        width, _ = next(toks)
        height, _ = next(toks)
        maxval, end = next(toks)
    except StopIteration:
        raise ImageFormatError(f"{path}: truncated header") from None
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported netpbm magic {magic!r}")
    w, h, maxv = int(width), int(height), int(maxval)
    if maxv != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported")
    c = 1 if magic == b"P5" else 3
    raster = data[end + 1:end + 1 + w * h * c]
    if len(raster) != w * h * c:
        raise ImageFormatError(f"{path}: raster too short")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, c)
    return arr.astype(np.float64) / 255.0


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_netpbm(path, img):
    """Write a float image in [0, 1] as P5 (1 channel) or P6 (3 channels)."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot write image of shape {arr.shape}")
    h, w = arr.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(arr).tobytes())


def normalize_to_unit(arr):
    """Min-max scale to [0, 1]; a constant array maps to zeros."""
    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi <= lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)
