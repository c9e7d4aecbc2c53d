"""Binary PPM (P6) / PGM (P5) image I/O and the in-memory image type.

This is the only image format the toolchain accepts. Pixels are stored as
float in [0, 1]; files are 8-bit with maxval 255.
"""

import os
from dataclasses import dataclass

import numpy as np


class ImageFormatError(ValueError):
    pass


@dataclass
class RawImage:
    height_px: int
    width_px: int
    channels: int
    pixels: np.ndarray  # (h, w, c) float64 in [0, 1]

    def __post_init__(self):
        if self.height_px < 1 or self.width_px < 1:
            raise ValueError("image dims must be >= 1")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.pixels.shape != (self.height_px, self.width_px, self.channels):
            raise ValueError("pixel buffer shape mismatch")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def aspect(self):
        return self.width_px / self.height_px


def from_bytes(data, height, width, channels):
    arr = np.frombuffer(data, dtype=np.uint8).astype(np.float64) / 255.0
    return RawImage(height, width, channels, arr.reshape(height, width, channels))


def _read_token(buf, pos):
    # skip whitespace and `#` comments between header tokens
    while pos < len(buf):
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    return buf[start:pos], pos


def read_image(path):
    """Read a binary PPM (P6, RGB) or PGM (P5, gray) file."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, pos = _read_token(buf, 0)
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise ImageFormatError(f"unsupported magic {magic!r} (want P5/P6)")
    w_tok, pos = _read_token(buf, pos)
    h_tok, pos = _read_token(buf, pos)
    max_tok, pos = _read_token(buf, pos)
    width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    if maxval != 255:
        raise ImageFormatError("only maxval 255 supported")
    pos += 1  # single whitespace byte after maxval
    need = width * height * channels
    raster = buf[pos:pos + need]
    if len(raster) != need:
        raise ImageFormatError("truncated raster")
    return from_bytes(raster, height, width, channels)


def write_image(path, img):
    """Write PPM for 3-channel images, PGM for 1-channel."""
    magic = b"P6" if img.channels == 3 else b"P5"
    raster = np.clip(np.round(img.pixels * 255.0), 0, 255).astype(np.uint8)
    header = magic + b"\n%d %d\n255\n" % (img.width_px, img.height_px)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(raster.tobytes())
    os.replace(tmp, path)


def write_gray(path, values):
    """Write a 2-D float array in [0, 1] as PGM."""
    h, w = values.shape
    write_image(path, RawImage(h, w, 1, values.reshape(h, w, 1)))


def write_rgb(path, values):
    """Write an (h, w, 3) float array in [0, 1] as PPM."""
    h, w, _ = values.shape
    write_image(path, RawImage(h, w, 3, values))
