"""Binary PGM (P5) image I/O.

Scans are stored as 8-bit grayscale PGM files and handled in memory as
float64 arrays in [0, 1].
"""

import re
from pathlib import Path

import numpy as np

from tinc.errors import ValidationError

_HEADER = re.compile(rb"^P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def write_pgm(path, image):
    """Write a float array in [0, 1] as an 8-bit binary PGM."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValidationError(f"image must be 2-d, got shape {image.shape}")
    if not np.isfinite(image).all():
        raise ValidationError("image contains non-finite values")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValidationError("image values must lie in [0, 1]")
    quantized = np.round(image * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(quantized.tobytes())


def read_pgm(path):
    """Read an 8-bit binary PGM into a float64 array in [0, 1]."""
    data = Path(path).read_bytes()
    match = _HEADER.match(data)
    if match is None:
        raise ValidationError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise ValidationError(f"{path}: only maxval 255 is supported, got {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=match.end())
    if pixels.size != h * w:
        raise ValidationError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).astype(np.float64) / 255.0
