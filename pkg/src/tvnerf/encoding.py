"""Multi-resolution hash-grid position encoding and frequency direction encoding."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DomainError

PRIMES = (1, 2654435761, 805459861)

# corner offsets in (x, y, z) order, x fastest
_CORNERS = np.array(list(product((0, 1), repeat=3)))[:, ::-1]


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 8
    features: int = 2
    log2_table_size: int = 15
    base_resolution: int = 16
    growth: float = 1.5

    def __post_init__(self):
        if self.levels < 1 or self.features < 1:
            raise ConfigError("levels and features must be >= 1")
        if self.growth <= 1.0:
            raise ConfigError("growth factor must be > 1")
        if self.base_resolution < 1:
            raise ConfigError("base resolution must be >= 1")

    @property
    def table_size(self):
        return 1 << self.log2_table_size

    @property
    def output_dim(self):
        return self.levels * self.features

    def resolution(self, level):
        return int(np.floor(self.base_resolution * self.growth ** level))

    def is_dense(self, level):
        # (N+1)^3 lattice corners fit without hashing
        return (self.resolution(level) + 1) ** 3 <= self.table_size


@dataclass(frozen=True)
class DirectionEncodingConfig:
    frequencies: int = 4

    @property
    def output_dim(self):
        return 3 + 6 * self.frequencies


def hash_index(coords, table_size):
    """Spatial hash of integer lattice coordinates (..., 3) into [0, table_size).

    XOR of per-axis products with the primes (1, 2654435761, 805459861),
    masked to the power-of-two table size.
    """
    if table_size & (table_size - 1):
        raise ConfigError("table size must be a power of two")
    c = np.asarray(coords).astype(np.uint64)
    h = c[..., 0] * np.uint64(PRIMES[0])
    h ^= c[..., 1] * np.uint64(PRIMES[1])
    h ^= c[..., 2] * np.uint64(PRIMES[2])
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def level_index(coords, level, config):
    """Row index within one level's table: dense at coarse levels, hashed above."""
    c = np.asarray(coords, dtype=np.int64)
    if config.is_dense(level):
        n = config.resolution(level) + 1
        return c[..., 0] + n * (c[..., 1] + n * c[..., 2])
    return hash_index(c, config.table_size)


def corner_lookup(x, config, debug=False):
    """Global table rows and trilinear weights for points ``x`` (P, 3) in the unit cube.

    Returns ``(rows, weights)`` of shape (P, L, 8); rows index the stacked
    (L * table_size, F) table.  Corner k has offsets (k & 1, k >> 1 & 1, k >> 2).
    """
    x = np.asarray(x, dtype=np.float64)
    if debug and (np.any(x < 0) or np.any(x > 1)):
        raise DomainError("position outside the unit cube")
    x = np.clip(x, 0.0, 1.0)
    P = x.shape[0]
    rows = np.empty((P, config.levels, 8), dtype=np.int64)
    weights = np.empty((P, config.levels, 8), dtype=np.float64)
    for level in range(config.levels):
        n = config.resolution(level)
        pos = x * n
        base = np.minimum(np.floor(pos), n - 1).astype(np.int64)
        frac = pos - base
        # per-axis pairs broadcast to a (P, z, y, x) block; flattening gives corner order
        wx, wy, wz = ((np.stack([1.0 - frac[:, a], frac[:, a]], axis=-1)) for a in range(3))
        weights[:, level] = (wz[:, :, None, None] * wy[:, None, :, None]
                             * wx[:, None, None, :]).reshape(P, 8)
        ix, iy, iz = (base[:, a, None] + np.arange(2) for a in range(3))
        if config.is_dense(level):
            m = n + 1
            idx = ix[:, None, None, :] + m * (iy[:, None, :, None] + m * iz[:, :, None, None])
        else:
            hx, hy, hz = (v.astype(np.uint64) * np.uint64(p)
                          for v, p in zip((ix, iy, iz), PRIMES))
            idx = (hx[:, None, None, :] ^ hy[:, None, :, None] ^ hz[:, :, None, None]) \
                & np.uint64(config.table_size - 1)
        idx = idx.reshape(P, 8).astype(np.int64)
        rows[:, level] = idx + level * config.table_size
    return rows, weights


def encode_position(x, config, table, debug=False):
    """Hash-grid features (P, L*F) for points in the unit cube.

    ``table`` is the stacked (L * table_size, F) array or a Var holding it;
    with a Var, gradients reach exactly the 8 corner rows per level.
    """
    rows, weights = corner_lookup(x, config, debug=debug)
    feats = ad.interp(table, rows, weights)                                 # (P, L, F)
    return ad.reshape(feats, (rows.shape[0], config.output_dim))


def init_table(config, rng, scale=1e-4, dtype=np.float32):
    return rng.uniform(-scale, scale, size=(config.levels * config.table_size,
                                            config.features)).astype(dtype)


def encode_direction(d, config):
    """``d`` followed by sin/cos(2^k pi d) for k < K; output (P, 3 + 6K)."""
    d = np.atleast_2d(np.asarray(d, dtype=np.float64))
    norms = np.linalg.norm(d, axis=-1)
    if np.any(norms == 0):
        raise DomainError("zero-length direction")
    if np.any(np.abs(norms - 1) > 1e-6):
        raise DomainError("direction is not unit length")
    parts = [d]
    for k in range(config.frequencies):
        arg = (2.0 ** k) * np.pi * d
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=-1)
