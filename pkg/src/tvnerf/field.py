"""Neural scene function: density trunk plus reflectance, illumination and thermal heads."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .encoding import DirectionEncodingConfig, HashGridConfig, encode_direction, \
    encode_position, init_table
from .errors import ConfigError, FormatError, NumericError

CKPT_MAGIC = b"TNFCKPT"
CKPT_VERSION = 1


@dataclass(frozen=True)
class FieldConfig:
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    direction: DirectionEncodingConfig = field(default_factory=DirectionEncodingConfig)
    trunk_width: int = 64
    trunk_depth: int = 2
    geo_features: int = 15
    head_width: int = 32
    head_depth: int = 1
    heads: int = 4                 # j + 1 illumination heads
    u_max: float = 10.0
    density_scale: float = 10.0
    retinex: bool = True
    bounds: tuple = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))

    def __post_init__(self):
        for name in ("trunk_width", "trunk_depth", "head_width", "head_depth", "heads",
                     "geo_features"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        if np.any(hi <= lo):
            raise ConfigError("scene bounds must have positive extent")

    @property
    def ill_channels(self):
        return 1 if self.retinex else 3

    def head_layout(self):
        """(name, output width) for every prediction head, in evaluation order."""
        heads = [("ref", 3)] if self.retinex else []
        heads += [(f"ill{k}", self.ill_channels) for k in range(self.heads)]
        heads.append(("thermal", 1))
        return heads

    def to_dict(self):
        d = asdict(self)
        d["bounds"] = [list(b) for b in self.bounds]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["grid"] = HashGridConfig(**d.get("grid", {}))
        d["direction"] = DirectionEncodingConfig(**d.get("direction", {}))
        if "bounds" in d:
            d["bounds"] = tuple(tuple(float(v) for v in b) for b in d["bounds"])
        return cls(**d)


@dataclass
class FieldSample:
    """Per-point field outputs.

    sigma (P,), ref (P, 3), ill (P, heads, c) with c = 1 under Retinex and
    3 otherwise, thermal (P,).  Entries are arrays or Vars.
    """
    sigma: object
    ref: object
    ill: object
    thermal: object


def exp_activation(u, u_max=10.0):
    """exp(min(u, u_max)): linear radiance with a hard ceiling (zero slope above it)."""
    return ad.exp(ad.clamp(u, hi=u_max))


def _block_diag(mats, dtype):
    """Assemble a block-diagonal matrix from 2-D arrays/Vars without coupling blocks."""
    rows = [m.shape[0] for m in mats]
    cols = [m.shape[1] for m in mats]
    total = sum(cols)
    bands = []
    for i, m in enumerate(mats):
        left, right = sum(cols[:i]), total - sum(cols[:i + 1])
        parts = []
        if left:
            parts.append(np.zeros((rows[i], left), dtype=dtype))
        parts.append(m)
        if right:
            parts.append(np.zeros((rows[i], right), dtype=dtype))
        bands.append(ad.concat(parts, axis=1) if len(parts) > 1 else m)
    return ad.concat(bands, axis=0) if len(bands) > 1 else bands[0]


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_params(config, rng, dtype=np.float32):
    """Fresh ParameterStore: hash table ~U(+-1e-4), weights ~U(+-1/sqrt(fan_in)), zero biases."""
    rng = np.random.default_rng(rng)
    arrays, groups = {}, {}
    arrays["grid"] = init_table(config.grid, rng, dtype=dtype)
    groups["grid"] = "grid"
    width_in = config.grid.output_dim
    for k in range(config.trunk_depth):
        arrays[f"trunk.W{k}"] = _uniform(rng, width_in, (width_in, config.trunk_width), dtype)
        arrays[f"trunk.b{k}"] = np.zeros(config.trunk_width, dtype)
        width_in = config.trunk_width
    out = 1 + config.geo_features
    arrays["trunk.Wout"] = _uniform(rng, width_in, (width_in, out), dtype)
    arrays["trunk.bout"] = np.zeros(out, dtype)
    head_in = config.geo_features + config.direction.output_dim
    for name, width_out in config.head_layout():
        w_in = head_in
        for k in range(config.head_depth):
            arrays[f"head.{name}.W{k}"] = _uniform(rng, w_in, (w_in, config.head_width), dtype)
            arrays[f"head.{name}.b{k}"] = np.zeros(config.head_width, dtype)
            w_in = config.head_width
        arrays[f"head.{name}.Wout"] = _uniform(rng, w_in, (w_in, width_out), dtype)
        arrays[f"head.{name}.bout"] = np.zeros(width_out, dtype)
    for name in arrays:
        groups.setdefault(name, "mlp")
    return ad.ParameterStore(arrays, groups=groups, dtype=dtype)


class NeuralField:
    """Hash-grid trunk with parallel prediction heads.

    ``query`` evaluates on a tape when ``params`` holds Vars (see
    :meth:`ParameterStore.attach`) and in plain numpy otherwise.
    """

    def __init__(self, config=None, store=None, seed=0, dtype=np.float32):
        self.config = config or FieldConfig()
        self.store = store if store is not None else init_params(self.config, seed, dtype)

    @property
    def heads(self):
        return self.config.heads

    def to_unit(self, x):
        lo = np.asarray(self.config.bounds[0])
        hi = np.asarray(self.config.bounds[1])
        return (np.asarray(x) - lo) / (hi - lo)

    def query(self, x, d, params=None):
        cfg = self.config
        if params is None:
            params = {name: self.store[name] for name in self.store.names()}
        table = params["grid"]
        dtype = table.tape.dtype if isinstance(table, ad.Var) else np.asarray(table).dtype

        xu = self.to_unit(x)
        inside = np.all((xu >= 0) & (xu <= 1), axis=-1).astype(dtype)
        h = encode_position(np.clip(xu, 0, 1), cfg.grid, table)
        for k in range(cfg.trunk_depth):
            h = ad.relu(h @ params[f"trunk.W{k}"] + params[f"trunk.b{k}"])
        out = h @ params["trunk.Wout"] + params["trunk.bout"]
        sigma = ad.softplus(out[:, 0]) * (cfg.density_scale * inside)
        geo = out[:, 1:]

        denc = encode_direction(d, cfg.direction).astype(dtype)
        hin = ad.concat([geo, denc], axis=1)

        layout = cfg.head_layout()
        names = [n for n, _ in layout]
        h = ad.relu(hin @ ad.concat([params[f"head.{n}.W0"] for n in names], axis=1)
                    + ad.concat([params[f"head.{n}.b0"] for n in names], axis=0))
        for k in range(1, cfg.head_depth):
            h = ad.relu(h @ _block_diag([params[f"head.{n}.W{k}"] for n in names], dtype)
                        + ad.concat([params[f"head.{n}.b{k}"] for n in names], axis=0))
        raw = h @ _block_diag([params[f"head.{n}.Wout"] for n in names], dtype) \
            + ad.concat([params[f"head.{n}.bout"] for n in names], axis=0)

        cols, start = {}, 0
        for name, width in layout:
            cols[name] = raw[:, start:start + width]
            start += width

        P = np.shape(x)[0]
        c = cfg.ill_channels
        ill = ad.concat([ad.reshape(exp_activation(cols[f"ill{k}"], cfg.u_max), (P, 1, c))
                         for k in range(cfg.heads)], axis=1)
        if cfg.retinex:
            ref = ad.sigmoid(cols["ref"])
        else:
            ref = np.ones((P, 3), dtype=dtype)
        thermal = ad.sigmoid(cols["thermal"][:, 0])
        sample = FieldSample(sigma=sigma, ref=ref, ill=ill, thermal=thermal)
        _check_sample(sample)
        return sample


def _check_sample(sample):
    for label in ("sigma", "ref", "ill", "thermal"):
        v = ad.value_of(getattr(sample, label))
        if not np.all(np.isfinite(v)):
            raise NumericError("non-finite field output", where=label)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, config, params):
    """Write ``config`` (JSON-able dict) and a flat float32 parameter vector."""
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    vec = np.ascontiguousarray(params, dtype="<f4").reshape(-1)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        f.write(blob)
        f.write(struct.pack("<Q", vec.size))
        f.write(vec.tobytes())


def load_checkpoint(path):
    """Return ``(config dict, float32 parameter vector)``."""
    data = Path(path).read_bytes()
    if data[:7] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 15:
        raise FormatError(f"{path}: truncated header")
    version, nblob = struct.unpack_from("<II", data, 7)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 15 + nblob
    if len(data) < pos + 8:
        raise FormatError(f"{path}: truncated config block")
    config = json.loads(data[15:pos].decode("utf-8"))
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    if len(data) != pos + 4 * count:
        raise FormatError(f"{path}: payload size does not match parameter count")
    return config, np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float32)


def field_from_checkpoint(path):
    config, vec = load_checkpoint(path)
    fcfg = FieldConfig.from_dict(config["field"])
    store = init_params(fcfg, 0)
    if len(store) != vec.size:
        raise FormatError(f"{path}: parameter count {vec.size} does not match config")
    store.params[...] = vec
    return NeuralField(fcfg, store), config


__all__ = ["FieldConfig", "FieldSample", "NeuralField", "exp_activation", "init_params",
           "save_checkpoint", "load_checkpoint", "field_from_checkpoint"]
