"""Raw-domain simulation and finishing, plus the LRAW / PPM / PGM file formats.

LRAW layout (little-endian)::

    b"LRAW"  u16 version  u32 width  u32 height  u16 channels   (16 bytes)
    float32 payload, row-major, channel-interleaved
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

LRAW_MAGIC = b"LRAW"
LRAW_VERSION = 1
_HEADER = struct.Struct("<4sHIIH")
MAX_PIXELS = 1 << 28


@dataclass(frozen=True)
class NoiseModel:
    """Heteroscedastic Gaussian sensor noise: variance = shot * signal + read^2."""
    shot: float = 2e-4
    read: float = 1e-4

    def __post_init__(self):
        if self.shot < 0 or self.read < 0:
            raise ConfigError("noise parameters must be nonnegative")

    def variance(self, signal):
        return self.shot * np.maximum(signal, 0) + self.read ** 2


def simulate_short_exposure(clean, gain, noise=None, rng=None):
    """clamp(gain * clean + noise, 0, 1) with noise drawn at the scaled signal level."""
    if gain <= 0:
        raise ConfigError("exposure gain must be positive")
    signal = gain * np.asarray(clean, dtype=np.float64)
    if noise is not None and (noise.shot > 0 or noise.read > 0):
        rng = np.random.default_rng(rng)
        signal = signal + rng.standard_normal(signal.shape) * np.sqrt(noise.variance(signal))
    return np.clip(signal, 0.0, 1.0)


def srgb_encode(v):
    v = np.asarray(v, dtype=np.float64)
    return np.where(v <= 0.0031308, 12.92 * v, 1.055 * np.power(np.maximum(v, 0), 1 / 2.4) - 0.055)


def postprocess(raw, white_balance=None, gain=1.0):
    """Linear raw -> 8-bit display image: gain and white balance, clip, sRGB curve, round."""
    raw = np.asarray(raw, dtype=np.float64)
    wb = 1.0 if white_balance is None else np.asarray(white_balance, dtype=np.float64)
    v = np.clip(gain * wb * raw, 0.0, 1.0)
    return np.round(255.0 * srgb_encode(v)).astype(np.uint8)


def exposure_match_gain(pred, target):
    """Scalar g minimizing ||g * pred - target||^2."""
    pred = np.asarray(pred, dtype=np.float64)
    denom = float(np.sum(pred * pred))
    return 1.0 if denom == 0 else float(np.sum(pred * np.asarray(target, np.float64)) / denom)


# ---------------------------------------------------------------------------
# files

def write_lraw(image, path):
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        img = img[..., None]
    if img.ndim != 3:
        raise FormatError("LRAW images are (height, width[, channels])")
    h, w, c = img.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(LRAW_MAGIC, LRAW_VERSION, w, h, c))
        f.write(np.ascontiguousarray(img).tobytes())


def read_lraw(path):
    """Read an LRAW file into a float32 (height, width, channels) array."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, w, h, c = _HEADER.unpack_from(data)
    if magic != LRAW_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != LRAW_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    count = w * h * c
    if c == 0 or count > MAX_PIXELS:
        raise FormatError(f"{path}: dimensions {w}x{h}x{c} out of range")
    if len(data) - _HEADER.size != 4 * count:
        raise FormatError(f"{path}: payload is {len(data) - _HEADER.size} bytes, "
                          f"expected {4 * count}")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w, c).copy()


def write_pnm(image, path):
    """Binary PPM (P6) for 3-channel or PGM (P5) for 1-channel 8-bit images."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        tag = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"P6"
    else:
        raise FormatError("PNM output needs 1 or 3 channels")
    with open(path, "wb") as f:
        f.write(tag + b"\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(np.ascontiguousarray(img).tobytes())


def read_pnm(path):
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary PGM/PPM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PNM is supported")
    c = 3 if parts[0] == b"P6" else 1
    pixels = np.frombuffer(data[-w * h * c:], dtype=np.uint8)
    return pixels.reshape(h, w, c) if c == 3 else pixels.reshape(h, w)
