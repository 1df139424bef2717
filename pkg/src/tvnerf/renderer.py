"""Rays, stratified sampling and discrete volume rendering with Retinex accumulation.

Colors are formed in image space: reflectance and each illumination head are
accumulated with the same weights, and only the accumulated values are
multiplied, ``C_hat[k] = Ref * Ill[k]``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DomainError, NumericError


@dataclass
class Camera:
    """Pinhole camera; OpenCV axes (x right, y down, z forward), camera-to-world pose."""
    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ConfigError("need 0 < near < far")
        R = self.c2w[:3, :3]
        if self.c2w.shape != (4, 4) or not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise ConfigError("camera-to-world rotation is not orthonormal")

    @property
    def origin(self):
        return self.c2w[:3, 3]

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "near": self.near, "far": self.far, "c2w": self.c2w.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.array(d["c2w"]),
                   int(d["width"]), int(d["height"]), d["near"], d["far"])


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0:
        raise DomainError("camera placed at its target")
    forward /= norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        raise DomainError("degenerate look-at: view direction parallel to up vector")
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, down, forward, eye
    return c2w


@dataclass
class Rays:
    origins: np.ndarray      # (R, 3)
    dirs: np.ndarray         # (R, 3), unit
    near: np.ndarray         # (R,)
    far: np.ndarray          # (R,)

    def __len__(self):
        return self.origins.shape[0]

    def __getitem__(self, idx):
        return Rays(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx])


def pixel_centers(camera):
    """All pixel-center coordinates (u, v) = (i + 0.5, j + 0.5), row-major, shape (H*W, 2)."""
    j, i = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return np.stack([i.ravel() + 0.5, j.ravel() + 0.5], axis=-1)


def make_rays(camera, pixels):
    """Rays through image-plane points ``pixels`` (M, 2) given in pixel units."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    dirs_cam = np.stack([(pixels[:, 0] - camera.cx) / camera.fx,
                         (pixels[:, 1] - camera.cy) / camera.fy,
                         np.ones(len(pixels))], axis=-1)
    dirs = dirs_cam @ camera.c2w[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    n = len(pixels)
    return Rays(np.broadcast_to(camera.origin, (n, 3)).copy(), dirs,
                np.full(n, camera.near), np.full(n, camera.far))


def clip_to_box(rays, lo, hi, eps=1e-9):
    """Shrink each ray's [near, far] to its overlap with the box; misses keep their range."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rays.dirs
        t0 = (lo - rays.origins) * inv
        t1 = (hi - rays.origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    near = np.maximum(rays.near, tmin)
    far = np.minimum(rays.far, tmax)
    hit = far - near > eps
    return Rays(rays.origins, rays.dirs, np.where(hit, near, rays.near),
                np.where(hit, far, rays.far))


def sample_stratified(near, far, n, rng=None):
    """One sample per equal stratum of [near, far].

    Returns ``(t, delta)`` of shape (R, n).  With ``rng`` the samples are
    jittered uniformly inside their strata, otherwise bin centers are used.
    ``delta[i] = t[i+1] - t[i]`` and the last interval runs to ``far``.
    """
    if n < 1:
        raise ConfigError("need at least one sample per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    width = (far - near)[:, None] / n
    lower = near[:, None] + width * np.arange(n)[None, :]
    u = 0.5 if rng is None else rng.uniform(size=lower.shape)
    t = lower + u * width
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = far - t[:, -1]
    return t, delta


def compute_weights(sigma, delta):
    """Rendering weights ``w_i = (1 - exp(-sigma_i delta_i)) * T_i`` along the last axis."""
    tau = sigma * delta
    transmittance = ad.exp(-ad.cumsum(tau, axis=-1, exclusive=True))
    alpha = 1.0 - ad.exp(-tau)
    return alpha * transmittance


@dataclass
class RenderOutput:
    """Per-ray accumulations; fields are arrays or Vars.

    ref (R, 3), ill (R, heads, c), color (R, heads, 3) with
    ``color[:, k] = ref * ill[:, k]``, thermal (R,), opacity (R,), depth (R,).
    """
    ref: object
    ill: object
    color: object
    thermal: object
    opacity: object
    depth: object
    weights: object = None

    def numpy(self):
        return RenderOutput(**{f.name: (None if getattr(self, f.name) is None
                                        else ad.value_of(getattr(self, f.name)))
                               for f in fields(self)})


def render_rays(field, rays, n_samples=128, rng=None, params=None, keep_weights=False):
    """Render a batch of rays through ``field``.

    ``field.query(x, d, params)`` must return a FieldSample.  Passing tape
    Vars in ``params`` makes the whole render differentiable.
    """
    R = len(rays)
    t, delta = sample_stratified(rays.near, rays.far, n_samples, rng)
    x = rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]
    d = np.broadcast_to(rays.dirs[:, None, :], x.shape)
    sample = field.query(x.reshape(-1, 3), d.reshape(-1, 3), params)

    dtype = _dtype_of(sample.sigma)
    sigma = ad.reshape(sample.sigma, (R, n_samples))
    w = compute_weights(sigma, delta.astype(dtype))
    if not np.all(np.isfinite(ad.value_of(w))):
        bad = np.argwhere(~np.isfinite(ad.value_of(w)))[0]
        raise NumericError("non-finite rendering weight", where=f"ray {bad[0]}, sample {bad[1]}")

    ref = ad.reshape(sample.ref, (R, n_samples, 3))
    ill = sample.ill
    heads, c = np.shape(ad.value_of(ill))[1:]
    ill = ad.reshape(ill, (R, n_samples, heads, c))
    h = ad.reshape(sample.thermal, (R, n_samples))

    w3 = ad.reshape(w, (R, n_samples, 1))
    Ref = ad.sum(w3 * ref, axis=1)
    Ill = ad.sum(ad.reshape(w, (R, n_samples, 1, 1)) * ill, axis=1)
    color = ad.reshape(Ref, (R, 1, 3)) * Ill
    H = ad.sum(w * h, axis=1)
    opacity = ad.sum(w, axis=1)
    depth = ad.sum(w * t.astype(dtype), axis=1)
    return RenderOutput(Ref, Ill, color, H, opacity, depth, w if keep_weights else None)


def render_pixel(field, origin, direction, near, far, n_samples=128, rng=None, params=None):
    """Single-ray convenience wrapper around :func:`render_rays`."""
    rays = Rays(np.asarray(origin, float)[None], np.asarray(direction, float)[None],
                np.array([near], float), np.array([far], float))
    return render_rays(field, rays, n_samples, rng=rng, params=params)


def render_image(field, camera, n_samples=128, chunk=4096, bounds=None, **_):
    """Full-frame numpy render; returns a RenderOutput with (H, W, ...) arrays."""
    rays = make_rays(camera, pixel_centers(camera))
    if bounds is not None:
        rays = clip_to_box(rays, *bounds)
    parts = [render_rays(field, rays[s:s + chunk], n_samples).numpy()
             for s in range(0, len(rays), chunk)]
    out = {}
    for f in fields(RenderOutput):
        if f.name == "weights":
            continue
        arr = np.concatenate([getattr(p, f.name) for p in parts], axis=0)
        out[f.name] = arr.reshape((camera.height, camera.width) + arr.shape[1:])
    return RenderOutput(**out)


def _dtype_of(x):
    return x.tape.dtype if isinstance(x, ad.Var) else np.asarray(x).dtype
