"""Reading and writing single-channel rasters (binary PGM natively, PNG via Pillow)."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import UnreadableImage

_PGM_HEADER = re.compile(rb"\AP5(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)"
                         rb"(?:\s|#[^\n]*\n)+(\d+)\s")


def to_u8(img: np.ndarray) -> np.ndarray:
    """Map [0, 1] intensities to 0..255 with round-half-to-even."""
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_u8(data: np.ndarray) -> np.ndarray:
    return np.asarray(data, dtype=np.float64) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap intensities to the 8-bit grid used on disk."""
    return from_u8(to_u8(img))


def write_pgm(path, img: np.ndarray) -> None:
    """Binary P5, maxval 255; ``img`` holds intensities in [0, 1]."""
    data = to_u8(img)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pgm(path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableImage(f"{path}: {exc}") from exc
    m = _PGM_HEADER.match(raw)
    if not m:
        raise UnreadableImage(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 65536:
        raise UnreadableImage(f"{path}: bad maxval {maxval}")
    dtype = np.dtype(">u2" if maxval > 255 else np.uint8)
    body = raw[m.end():]
    if len(body) < w * h * dtype.itemsize:
        raise UnreadableImage(f"{path}: truncated pixel data")
    pix = np.frombuffer(body, dtype, w * h).reshape(h, w)
    return pix.astype(np.float64) / maxval


def read_image(path) -> np.ndarray:
    """Load PGM or any Pillow-readable file as float ``(H, W)`` or ``(H, W, C)`` in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    try:
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "RGB", "RGBA"):
                im = im.convert("RGB")
            arr = np.asarray(im)
    except Exception as exc:  # Pillow raises a zoo of exception types
        raise UnreadableImage(f"{path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0
