"""Image ingestion and the Gaussian filtering primitives scale space is built on.

Images are 2-D float64 arrays of shape (height, width) with intensities in
[0, 1]. Pixel (x, y) is ``img[y, x]``.
"""

from __future__ import annotations

import os

import numpy as np
from scipy.ndimage import correlate1d

from .errors import (
    CorruptFileError,
    NonPositiveSigmaError,
    TooSmallImageError,
    UnsupportedFormatError,
    ZeroDimensionError,
)

# ITU-R BT.601 luma weights for RGB -> gray.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _read_pgm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping '#' comment lines."""
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
    while pos < n and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise CorruptFileError("truncated PGM header")
    return buf[start:pos], pos


def load_pgm(path: str) -> np.ndarray:
    """Read a binary PGM (P5) file with maxval <= 255."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != b"P5":
        raise UnsupportedFormatError(f"{path}: not a binary (P5) PGM file")
    pos = 2
    try:
        w_tok, pos = _read_pgm_token(buf, pos)
        h_tok, pos = _read_pgm_token(buf, pos)
        m_tok, pos = _read_pgm_token(buf, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError as exc:
        raise CorruptFileError(f"{path}: malformed PGM header") from exc
    if width == 0 or height == 0:
        raise ZeroDimensionError(f"{path}: zero image dimension")
    if not 0 < maxval <= 255:
        raise UnsupportedFormatError(f"{path}: maxval {maxval} not supported")
    pos += 1  # single whitespace byte after maxval, per the netpbm spec
    raster = buf[pos:pos + width * height]
    if len(raster) < width * height:
        raise CorruptFileError(f"{path}: truncated PGM raster")
    data = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return data.astype(np.float64) / maxval


def _load_png(path: str) -> np.ndarray:
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif im.mode in ("RGB", "RGBA", "P"):
                rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
                r, g, b = LUMA_WEIGHTS
                arr = r * rgb[..., 0] + g * rgb[..., 1] + b * rgb[..., 2]
            elif im.mode in ("I;16", "I", "F"):
                raise UnsupportedFormatError(f"{path}: only 8-bit PNG supported")
            else:
                raise UnsupportedFormatError(f"{path}: PNG mode {im.mode!r}")
    except UnidentifiedImageError as exc:
        raise CorruptFileError(f"{path}: unreadable PNG") from exc
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ZeroDimensionError(f"{path}: zero image dimension")
    return arr


def load_image(path: str) -> np.ndarray:
    """Load a PGM (binary P5) or PNG image as grayscale intensities in [0, 1].

    RGB PNGs are converted with the 0.299/0.587/0.114 luma weights.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic[:2] == b"P5":
        return load_pgm(path)
    if magic == b"\x89PNG\r\n\x1a\n":
        return _load_png(path)
    raise UnsupportedFormatError(f"{path}: expected binary PGM (P5) or PNG")


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian with kernel radius ceil(4 * sigma)."""
    if sigma <= 0:
        raise NonPositiveSigmaError(f"sigma must be > 0, got {sigma}")
    radius = int(np.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge replication at the borders."""
    k = gaussian_kernel1d(sigma)
    img = np.asarray(img, dtype=np.float64)
    out = correlate1d(img, k, axis=1, mode="nearest")
    return correlate1d(out, k, axis=0, mode="nearest")


def half_sample(img: np.ndarray) -> np.ndarray:
    """Decimate by 2 with nearest sampling: out(x, y) = in(2x, 2y)."""
    img = np.asarray(img)
    h, w = img.shape
    if h < 2 or w < 2:
        raise TooSmallImageError(f"cannot half-sample a {w}x{h} image")
    return img[0:2 * (h // 2):2, 0:2 * (w // 2):2].copy()


def sample_intensity(img: np.ndarray, x: float, y: float) -> float:
    """Image intensity at the nearest pixel to (x, y), clipped to bounds."""
    h, w = img.shape
    xi = min(max(int(round(x)), 0), w - 1)
    yi = min(max(int(round(y)), 0), h - 1)
    return float(img[yi, xi])
