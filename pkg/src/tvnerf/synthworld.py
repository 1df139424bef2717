"""Analytic ground-truth scenes, a quadrature oracle for the rendering integral, and
synthetic multi-view thermal + raw-visible datasets.

Scenes are unions of constant-density spheres and boxes lit by an ambient
term plus point lights with power-law falloff.  Visible radiance factors as
``albedo * lighting`` and thermal emission is a per-primitive constant.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .field import FieldSample
from .isp import NoiseModel, postprocess, read_lraw, simulate_short_exposure, write_lraw, \
    write_pnm
from .renderer import Camera, look_at, make_rays, pixel_centers

UNIT_BOUNDS = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


@dataclass(frozen=True)
class Primitive:
    shape: str                       # "sphere" | "box"
    params: tuple                    # sphere: (cx, cy, cz, r); box: (x0, y0, z0, x1, y1, z1)
    density: float
    albedo: tuple
    temperature: float = 0.0

    def __post_init__(self):
        if self.shape not in ("sphere", "box"):
            raise ConfigError(f"unknown primitive shape {self.shape!r}")
        if self.density <= 0:
            raise ConfigError("primitive density must be positive")
        if not all(0 <= a <= 1 for a in self.albedo) or not 0 <= self.temperature <= 1:
            raise ConfigError("albedo and temperature must lie in [0, 1]")

    def contains(self, x):
        p = self.params
        if self.shape == "sphere":
            return np.sum((x - np.array(p[:3])) ** 2, axis=-1) <= p[3] ** 2
        return np.all((x >= np.array(p[:3])) & (x <= np.array(p[3:])), axis=-1)

    def aabb(self):
        p = np.array(self.params, dtype=float)
        if self.shape == "sphere":
            return p[:3] - p[3], p[:3] + p[3]
        return p[:3], p[3:]

    def intersections(self, o, d):
        """Entry/exit distances along the ray o + t d (empty if missed)."""
        p = self.params
        if self.shape == "sphere":
            oc = o - np.array(p[:3])
            b = float(oc @ d)
            disc = b * b - (float(oc @ oc) - p[3] ** 2)
            if disc <= 0:
                return []
            s = np.sqrt(disc)
            return [-b - s, -b + s]
        lo, hi = np.array(p[:3]), np.array(p[3:])
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (lo - o) / d
            t1 = (hi - o) / d
        tmin = np.nanmax(np.minimum(t0, t1))
        tmax = np.nanmin(np.maximum(t0, t1))
        return [tmin, tmax] if tmax > tmin else []


@dataclass(frozen=True)
class PointLight:
    position: tuple
    intensity: float
    falloff: float = 2.0


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple
    lights: tuple = ()
    ambient: float = 0.02
    bounds: tuple = UNIT_BOUNDS
    name: str = "custom"
    focal_scale: float = 1.0       # default dataset zoom; interiors are shot from closer

    def __post_init__(self):
        if self.ambient < 0:
            raise ConfigError("ambient must be nonnegative")
        if self.focal_scale <= 0:
            raise ConfigError("focal_scale must be positive")
        lo, hi = np.array(self.bounds[0]), np.array(self.bounds[1])
        for prim in self.primitives:
            a, b = prim.aabb()
            if np.any(a < lo - 1e-12) or np.any(b > hi + 1e-12):
                raise ConfigError(f"primitive {prim} leaves the scene bounds")

    def lighting(self, x):
        x = np.asarray(x, dtype=np.float64)
        light = np.full(x.shape[:-1], float(self.ambient))
        for L in self.lights:
            dist = np.linalg.norm(x - np.array(L.position), axis=-1)
            light = light + L.intensity / np.maximum(dist, 1e-6) ** L.falloff
        return light

    def components(self, x):
        """Density, albedo (.., 3), lighting and temperature at points ``x`` (.., 3).

        Overlaps resolve to the first primitive in list order.
        """
        x = np.asarray(x, dtype=np.float64)
        shape = x.shape[:-1]
        sigma = np.zeros(shape)
        albedo = np.zeros(shape + (3,))
        temp = np.zeros(shape)
        taken = np.zeros(shape, dtype=bool)
        for prim in self.primitives:
            hit = prim.contains(x) & ~taken
            sigma[hit] = prim.density
            albedo[hit] = prim.albedo
            temp[hit] = prim.temperature
            taken |= hit
        return sigma, albedo, self.lighting(x), temp

    def eval_scene(self, x, d=None):
        """(sigma, visible radiance (.., 3), thermal) at ``x``; direction is unused."""
        sigma, albedo, light, temp = self.components(x)
        return sigma, albedo * light[..., None], temp

    def occupancy(self, x):
        x = np.asarray(x, dtype=np.float64)
        occ = np.zeros(x.shape[:-1], dtype=bool)
        for prim in self.primitives:
            occ |= prim.contains(x)
        return occ

    def breakpoints(self, o, d):
        ts = []
        for prim in self.primitives:
            ts.extend(prim.intersections(o, d))
        return ts

    def to_dict(self):
        return {"name": self.name, "ambient": self.ambient,
                "bounds": [list(b) for b in self.bounds],
                "primitives": [asdict(p) for p in self.primitives],
                "lights": [asdict(L) for L in self.lights], "focal_scale": self.focal_scale}

    @classmethod
    def from_dict(cls, d):
        return cls(primitives=tuple(Primitive(p["shape"], tuple(p["params"]), p["density"],
                                              tuple(p["albedo"]), p["temperature"])
                                    for p in d["primitives"]),
                   lights=tuple(PointLight(tuple(L["position"]), L["intensity"], L["falloff"])
                                for L in d["lights"]),
                   ambient=d["ambient"], bounds=tuple(tuple(b) for b in d["bounds"]),
                   name=d.get("name", "custom"), focal_scale=d.get("focal_scale", 1.0))


# ---------------------------------------------------------------------------
# presets

OPAQUE = 5000.0


def _box(lo, hi, albedo, temp, density=OPAQUE):
    return Primitive("box", tuple(lo) + tuple(hi), density, tuple(albedo), temp)


def _sphere(c, r, albedo, temp, density=OPAQUE):
    return Primitive("sphere", tuple(c) + (r,), density, tuple(albedo), temp)


def preset(name):
    """Built-in scenes: "warm-sphere-night", "two-rooms", "cold-boxes"."""
    if name == "warm-sphere-night":
        return AnalyticScene(
            primitives=(
                _sphere((0.5, 0.5, 0.38), 0.2, (0.9, 0.55, 0.3), 0.9),
                _box((0.66, 0.16, 0.15), (0.86, 0.34, 0.36), (0.2, 0.35, 0.7), 0.05),
                _box((0.05, 0.05, 0.05), (0.95, 0.95, 0.15), (0.55, 0.5, 0.45), 0.15),
            ),
            lights=(PointLight((0.5, 0.3, 1.9), 1.1, 2.0),),
            ambient=0.02, name=name)
    if name == "two-rooms":
        # a lit room and a near-black one, split by a wall that is pale on the lit side
        return AnalyticScene(
            primitives=(
                _sphere((0.26, 0.5, 0.31), 0.15, (0.85, 0.8, 0.7), 0.7),
                _box((0.62, 0.3, 0.15), (0.88, 0.7, 0.4), (0.1, 0.08, 0.12), 0.4),
                _box((0.48, 0.05, 0.15), (0.5, 0.95, 0.55), (0.5, 0.5, 0.5), 0.2),
                _box((0.5, 0.05, 0.15), (0.52, 0.95, 0.55), (0.08, 0.08, 0.08), 0.2),
                _box((0.05, 0.05, 0.05), (0.5, 0.95, 0.15), (0.6, 0.6, 0.55), 0.1),
                _box((0.5, 0.05, 0.05), (0.95, 0.95, 0.15), (0.08, 0.08, 0.09), 0.1),
            ),
            lights=(PointLight((0.15, 0.5, 0.75), 0.03, 3.0),),
            ambient=0.002, name=name, focal_scale=2.5)
    if name == "cold-boxes":
        return AnalyticScene(
            primitives=(
                _box((0.2, 0.2, 0.15), (0.45, 0.45, 0.45), (0.7, 0.3, 0.3), 0.0),
                _box((0.55, 0.3, 0.15), (0.8, 0.55, 0.6), (0.3, 0.7, 0.35), 0.0),
                _box((0.3, 0.6, 0.15), (0.5, 0.8, 0.32), (0.35, 0.4, 0.8), 0.0),
                _box((0.05, 0.05, 0.05), (0.95, 0.95, 0.15), (0.5, 0.5, 0.5), 0.0),
            ),
            lights=(PointLight((0.3, 0.2, 1.9), 1.1, 2.0),),
            ambient=0.02, name=name)
    raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


PRESETS = ("warm-sphere-night", "two-rooms", "cold-boxes")


# ---------------------------------------------------------------------------
# oracle

@dataclass
class OracleResult:
    color: np.ndarray          # integral of T sigma albedo*light
    thermal: float
    reflectance: np.ndarray    # integral of T sigma albedo
    illumination: float        # integral of T sigma light
    opacity: float


def oracle_components(scene, origin, direction, near, far, nq=8192, tau_cap=60.0):
    """Composite midpoint quadrature of the continuous rendering integral along one ray.

    Subintervals are aligned to the analytic primitive boundaries so density
    is constant inside each, then spread over the occupied length in
    proportion to it (``nq`` in total).  Empty stretches contribute exactly
    zero and get no nodes; integration stops once the optical depth exceeds
    ``tau_cap`` (remaining transmittance below e^-60).
    """
    if nq < 1:
        raise ConfigError("nq must be >= 1")
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    cuts = sorted({near, far, *(t for t in scene.breakpoints(o, d) if near < t < far)})
    segs = []
    tau = 0.0
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b <= a:
            continue
        s = float(scene.components(o + 0.5 * (a + b) * d)[0])
        if s == 0:
            continue
        length = b - a
        if tau + s * length > tau_cap:
            length = (tau_cap - tau) / s
        segs.append((a, a + length))
        tau += s * length
        if tau >= tau_cap:
            break
    res = OracleResult(np.zeros(3), 0.0, np.zeros(3), 0.0, 0.0)
    total = sum(b - a for a, b in segs)
    if total <= 0:
        return res
    tau_before = 0.0
    for a, b in segs:
        n = max(1, int(round(nq * (b - a) / total)))
        h = (b - a) / n
        tm = a + (np.arange(n) + 0.5) * h
        sigma, albedo, light, temp = scene.components(o + tm[:, None] * d)
        inner = tau_before + np.concatenate([[0.0], np.cumsum(sigma * h)[:-1]]) + 0.5 * sigma * h
        w = np.exp(-inner) * sigma * h
        res.color += w @ (albedo * light[:, None])
        res.reflectance += w @ albedo
        res.illumination += float(w @ light)
        res.thermal += float(w @ temp)
        res.opacity += float(w.sum())
        tau_before += float(np.sum(sigma) * h)
    return res


def oracle_render(scene, origin, direction, near, far, nq=8192):
    """(C, H): ground-truth visible color and thermal value along one ray."""
    r = oracle_components(scene, origin, direction, near, far, nq)
    return r.color, r.thermal


def oracle_image(scene, camera, nq=512):
    """Ground-truth (H, W, 3) visible radiance and (H, W) thermal images for a camera."""
    rays = make_rays(camera, pixel_centers(camera))
    color = np.zeros((len(rays), 3))
    thermal = np.zeros(len(rays))
    for k in range(len(rays)):
        r = oracle_components(scene, rays.origins[k], rays.dirs[k], rays.near[k], rays.far[k], nq)
        color[k], thermal[k] = r.color, r.thermal
    return (color.reshape(camera.height, camera.width, 3),
            thermal.reshape(camera.height, camera.width))


class AnalyticField:
    """Debug hook: a field returning the analytic scene values, bypassing any MLP.

    Reflectance is the albedo; illumination head k is the lighting scaled by
    that head's cumulative gain, so head colors form a perfectly consistent ladder.
    """

    def __init__(self, scene, cumulative_gains=(1.0,)):
        self.scene = scene
        self.gains = np.asarray(cumulative_gains, dtype=np.float64)

    @property
    def heads(self):
        return len(self.gains)

    def query(self, x, d=None, params=None):
        sigma, albedo, light, temp = self.scene.components(x)
        ill = light[:, None, None] * self.gains[None, :, None]
        return FieldSample(sigma=sigma, ref=albedo, ill=ill, thermal=temp)


# ---------------------------------------------------------------------------
# datasets

@dataclass
class DatasetSpec:
    views: int = 16
    heldout: int = 2
    size: int = 64
    short_gain: float = 1.0 / 64
    long_gain: float = 1.0
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0
    radius: float = 2.0
    elevations: tuple = (30.0, 50.0)
    focal_scale: float | None = None      # None: the scene's own framing
    nq: int = 512

    def __post_init__(self):
        if self.views < 2:
            raise ConfigError("need at least two views")
        if not 0 <= self.heldout < self.views:
            raise ConfigError("held-out count must leave at least one training view")
        if self.short_gain <= 0 or self.long_gain <= 0:
            raise ConfigError("exposure gains must be positive")
        if self.focal_scale is not None and self.focal_scale <= 0:
            raise ConfigError("focal_scale must be positive")


def heldout_indices(views, heldout):
    return sorted({min(views - 1, int(round((i + 0.5) * views / heldout)))
                   for i in range(heldout)}) if heldout else []


def ring_cameras(n, size, radius=2.0, elevations=(30.0, 50.0), focal_scale=1.0,
                 center=(0.5, 0.5, 0.5), azimuth_offset=0.0):
    """Cameras on a ring around ``center``; elevation cycles through ``elevations``."""
    cams = []
    center = np.asarray(center, dtype=np.float64)
    f = focal_scale * size
    for k in range(n):
        az = azimuth_offset + 2 * np.pi * k / n
        el = np.deg2rad(elevations[k % len(elevations)])
        eye = center + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                                          np.sin(el)])
        cams.append(Camera(f, f, size / 2, size / 2, look_at(eye, center), size, size,
                           max(radius - 1.0, 1e-3), radius + 1.0))
    return cams


def emit_dataset(scene, spec, out_dir):
    """Write a dataset: per view short/long/thermal LRAW + PPM preview, and poses.json.

    Returns a summary dict (view count, dark-pixel fraction, file list).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    zoom = scene.focal_scale if spec.focal_scale is None else spec.focal_scale
    cams = ring_cameras(spec.views, spec.size, spec.radius, spec.elevations, zoom)
    held = set(heldout_indices(spec.views, spec.heldout))
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.views)
    entries, files = [], []
    dark = total = 0
    for k, cam in enumerate(cams):
        clean, thermal = oracle_image(scene, cam, spec.nq)
        short = simulate_short_exposure(clean, spec.short_gain, spec.noise,
                                        np.random.default_rng(seeds[k]))
        long = simulate_short_exposure(clean, spec.long_gain)
        names = {"short": f"view_{k}_short.lraw", "long": f"view_{k}_long.lraw",
                 "thermal": f"view_{k}_thermal.lraw", "preview": f"view_{k}_preview.ppm"}
        write_lraw(short, out / names["short"])
        write_lraw(long, out / names["long"])
        write_lraw(thermal[..., None], out / names["thermal"])
        write_pnm(postprocess(short, gain=spec.long_gain / spec.short_gain), out / names["preview"])
        files += list(names.values())
        dark += int(np.sum(short < 0.1))
        total += short.size
        entries.append({"index": k, "split": "heldout" if k in held else "train",
                        "camera": cam.to_dict(), "files": names})
    manifest = {
        "version": 1,
        "scene": scene.to_dict(),
        "width": spec.size, "height": spec.size,
        "short_gain": spec.short_gain, "long_gain": spec.long_gain,
        "noise": {"shot": spec.noise.shot, "read": spec.noise.read},
        "seed": spec.seed, "radius": spec.radius,
        "views": entries,
    }
    (out / "poses.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return {"views": spec.views, "dark_fraction": dark / total,
            "files": files + ["poses.json"]}


@dataclass
class Dataset:
    manifest: dict
    cameras: list
    splits: list
    short: list
    long: list
    thermal: list
    root: Path

    @property
    def scene(self):
        return AnalyticScene.from_dict(self.manifest["scene"])

    def indices(self, split):
        return [k for k, s in enumerate(self.splits) if s == split]


def load_dataset(root):
    """Read poses.json and all referenced images; validates sizes against the poses."""
    root = Path(root)
    path = root / "poses.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found")
    manifest = json.loads(path.read_text())
    cams, splits, short, long, thermal = [], [], [], [], []
    for entry in manifest["views"]:
        cam = Camera.from_dict(entry["camera"])
        files = entry["files"]
        imgs = {}
        for key in ("short", "long", "thermal"):
            f = root / files[key]
            if not f.exists():
                raise FileNotFoundError(f"missing image {f}")
            imgs[key] = read_lraw(f)
            if imgs[key].shape[:2] != (cam.height, cam.width):
                raise FormatError(f"{f}: size {imgs[key].shape[:2]} does not match its pose")
        cams.append(cam)
        splits.append(entry["split"])
        short.append(imgs["short"])
        long.append(imgs["long"])
        thermal.append(imgs["thermal"][..., 0])
    return Dataset(manifest, cams, splits, short, long, thermal, root)


__all__ = ["Primitive", "PointLight", "AnalyticScene", "preset", "PRESETS", "OracleResult",
           "oracle_components", "oracle_render", "oracle_image", "AnalyticField",
           "DatasetSpec", "emit_dataset", "load_dataset", "Dataset", "ring_cameras",
           "heldout_indices"]
