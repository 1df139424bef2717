"""Training loop, view rendering and held-out evaluation."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .encoding import HashGridConfig
from .errors import ConfigError, DivergenceError, NumericError, ShapeError
from .exposure import ExposureLadder, composite, gate_mu
from .field import FieldConfig, NeuralField, field_from_checkpoint, save_checkpoint
from .isp import exposure_match_gain, postprocess, write_lraw, write_pnm
from .losses import LossWeights, balanced_loss, exposure_loss, log_header, log_line, \
    thermal_loss, total_loss
from .metrics import psnr, ssim
from .renderer import Rays, clip_to_box, make_rays, pixel_centers, render_image, render_rays

MODES = ("raw", "exposure-k", "thermal", "reflectance", "illumination")
DARK_LEVEL = 0.02


@dataclass
class TrainConfig:
    steps: int = 5000
    batch: int = 256
    samples: int = 64                # per ray while training (jittered)
    eval_samples: int = 128
    lr_grid: float = 1e-2
    lr_mlp: float = 1e-3
    lr_floor: float = 0.1            # cosine decay ends at lr * lr_floor
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    heads: int = 4
    gains: tuple = (10.0, 10.0, 10.0)
    gamma: float = 0.9
    gate_mode: str = "channel"
    lambda_t: float = 1.0
    lambda_b: float = 1.0
    lambda_i: tuple = (1.0,)
    epsilon: float = 1e-3
    w_min: float = 0.1
    thermal_on: bool = True
    retinex_on: bool = True
    multi_exposure_on: bool = True
    balanced_loss_on: bool = True
    log2_table_size: int = 15
    seed: int = 0
    val_every: int = 500
    ckpt_every: int = 0

    def __post_init__(self):
        self.gains = tuple(float(g) for g in self.gains)
        self.lambda_i = tuple(float(v) for v in self.lambda_i)
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.batch < 1 or self.samples < 1 or self.eval_samples < 1:
            raise ConfigError("batch and sample counts must be >= 1")
        if self.heads < 1:
            raise ConfigError("need at least one head")
        if len(self.gains) < self.heads - 1:
            raise ConfigError(f"{self.heads} heads need {self.heads - 1} gains, "
                              f"got {len(self.gains)}")
        self.ladder  # validates gains/gamma/gate mode
        self.weights

    @property
    def ladder(self):
        return ExposureLadder(self.gains, self.gamma, self.gate_mode).truncated(self.heads)

    @property
    def weights(self):
        return LossWeights(self.lambda_t, self.lambda_b, self.lambda_i, self.epsilon, self.w_min)

    @property
    def active_heads(self):
        """Heads that enter the losses and the composite."""
        return self.heads if self.multi_exposure_on else 1

    def field_config(self):
        return FieldConfig(grid=HashGridConfig(log2_table_size=self.log2_table_size),
                           heads=self.heads, retinex=self.retinex_on)

    def loss_columns(self):
        cols = ["total"]
        if self.thermal_on:
            cols.append("L_t")
        if self.balanced_loss_on:
            cols.append("L_b")
        cols += [f"L_{i}" for i in range(self.active_heads)]
        return cols + ["gate"]

    def to_dict(self):
        d = asdict(self)
        d["gains"] = list(self.gains)
        d["lambda_i"] = list(self.lambda_i)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class TrainResult:
    field: NeuralField
    log: list
    history: list = field(default_factory=list)       # breakdown dicts, one per step
    validation: list = field(default_factory=list)    # (step, mean held-out PSNR)
    seconds: float = 0.0


def lr_schedule(step, steps, floor):
    """Cosine decay from 1 to ``floor`` over ``steps``."""
    if steps <= 1:
        return 1.0
    return floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * step / (steps - 1)))


def training_rays(dataset, indices, bounds):
    """Stack every pixel ray of the given views with its short-exposure and thermal target."""
    rays, color, thermal = [], [], []
    for k in indices:
        cam = dataset.cameras[k]
        r = make_rays(cam, pixel_centers(cam))
        rays.append(clip_to_box(r, *bounds))
        color.append(dataset.short[k].reshape(-1, 3))
        thermal.append(dataset.thermal[k].reshape(-1))
        if dataset.short[k].shape[:2] != dataset.thermal[k].shape[:2]:
            raise ShapeError(f"view {k}: visible and thermal images are not aligned")
    cat = lambda xs: np.concatenate(xs, axis=0)
    return (Rays(cat([r.origins for r in rays]), cat([r.dirs for r in rays]),
                 cat([r.near for r in rays]), cat([r.far for r in rays])),
            cat(color), cat(thermal))


def _init_illumination_bias(fld, cfg, target):
    """Start each illumination head near the mean brightness of its supervision target."""
    lit = target[target > 0]
    level = float(lit.mean()) if lit.size else 1e-3
    ref0 = 0.5 if cfg.retinex_on else 1.0
    ladder = cfg.ladder
    u_max = fld.config.u_max
    for k in range(cfg.heads):
        gk = ladder.cumulative_gain(min(k, ladder.heads - 1))
        fld.store[f"head.ill{k}.bout"][...] = np.clip(np.log(gk * level / ref0), -u_max, u_max)


def head_colors(out, count):
    return [out.color[:, k, :] for k in range(count)]


def gate_fractions(colors, ladder):
    """Fraction of gated-off (mu = 0) entries for each head on a batch of predictions."""
    return [float(np.mean(gate_mu(i, None if i == 0 else colors[i - 1], ladder.gain(i),
                                  ladder.gate_mode) == 0))
            for i in range(len(colors))]


def batch_loss(fld, params, rays, color, thermal, cfg, rng):
    """Render a ray batch on the tape and assemble the weighted objective.

    Returns ``(total Var, breakdown dict, supervised fraction)``.
    """
    out = render_rays(fld, rays, cfg.samples, rng=rng, params=params)
    ladder = cfg.ladder.truncated(cfg.active_heads)
    heads = head_colors(out, cfg.active_heads)
    weights = cfg.weights
    comps = {}
    if cfg.thermal_on:
        comps["L_t"] = thermal_loss(out.thermal, thermal)
    if cfg.balanced_loss_on:
        blended = composite(heads, ladder)
        comps["L_b"] = balanced_loss(blended, color, out.thermal if cfg.thermal_on else None,
                                     weights.epsilon, weights.w_min)
    active = []
    for i in range(cfg.active_heads):
        mu = gate_mu(i, None if i == 0 else heads[i - 1], ladder.gain(i), ladder.gate_mode)
        mu = np.broadcast_to(mu, color.shape).astype(color.dtype)
        active.append(mu.mean())
        comps[f"L_{i}"] = exposure_loss(i, heads[i], color, ladder, mu)
    total, breakdown = total_loss(comps, weights)
    return total, breakdown, float(np.mean(active))


def train(dataset, fld=None, config=None, log_path=None, ckpt_path=None, val_views=None,
          progress=None):
    """Optimize a field on the training split of ``dataset``.

    Raises DivergenceError (parameters restored to the last finite step) if the
    loss, a gradient or a field output stops being finite.
    """
    cfg = config or TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    if fld is None:
        fld = NeuralField(cfg.field_config(), seed=cfg.seed)
    if fld.heads < cfg.heads:
        raise ConfigError(f"field has {fld.heads} heads, config needs {cfg.heads}")
    train_idx = dataset.indices("train")
    if not train_idx:
        raise ConfigError("dataset has no training views")
    if val_views is None:
        val_views = dataset.indices("heldout")
    rays, color, thermal = training_rays(dataset, train_idx, fld.config.bounds)
    dtype = fld.store.params.dtype
    color = color.astype(dtype)
    thermal = thermal.astype(dtype)
    if cfg.steps > 0:
        _init_illumination_bias(fld, cfg, color)

    store = fld.store
    grid_mask = store.group_mask("grid")
    columns = cfg.loss_columns()
    log = []
    result = TrainResult(fld, log)
    logf = open(log_path, "w") if log_path else None
    if logf and cfg.steps:
        logf.write(log_header(columns) + "\n")
    good = store.params.copy()
    t0 = time.perf_counter()
    try:
        for step in range(cfg.steps):
            idx = rng.integers(0, len(rays), cfg.batch)
            tape = ad.Tape(dtype=dtype)
            try:
                params = store.attach(tape)
                total, breakdown, active = batch_loss(fld, params, rays[idx], color[idx],
                                                      thermal[idx], cfg, rng)
                if not np.isfinite(breakdown["total"]):
                    raise NumericError("non-finite loss", where="total")
                tape.backward(total)
                scale = lr_schedule(step, cfg.steps, cfg.lr_floor)
                lr = np.where(grid_mask, cfg.lr_grid * scale, cfg.lr_mlp * scale).astype(dtype)
                ad.adam_step(store, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
                if not np.all(np.isfinite(store.params)):
                    raise NumericError("non-finite parameter after update", where="adam")
            except NumericError as exc:
                store.params[...] = good
                store.zero_grad()
                saved = None
                if ckpt_path:
                    saved = str(ckpt_path)
                    save_checkpoint(ckpt_path, checkpoint_config(fld, cfg, dataset), good)
                raise DivergenceError(f"training diverged at step {step}: {exc}",
                                      last_finite_step=step - 1, checkpoint=saved) from exc
            good[...] = store.params
            line = log_line(step, breakdown, active, columns)
            log.append(line)
            result.history.append(breakdown)
            if logf:
                logf.write(line + "\n")
            if progress:
                progress(step, breakdown)
            done = step + 1
            if cfg.val_every and val_views and done % cfg.val_every == 0:
                rows = evaluate(fld, dataset, cfg, views=val_views,
                                n_samples=min(cfg.eval_samples, 64))
                result.validation.append((done, rows[-1]["psnr"]))
            if ckpt_path and cfg.ckpt_every and done % cfg.ckpt_every == 0:
                save_checkpoint(ckpt_path, checkpoint_config(fld, cfg, dataset), store.params)
    finally:
        if logf:
            logf.close()
    if ckpt_path:
        save_checkpoint(ckpt_path, checkpoint_config(fld, cfg, dataset), store.params)
    result.seconds = time.perf_counter() - t0
    return result


def checkpoint_config(fld, cfg, dataset=None):
    d = {"field": fld.config.to_dict(), "train": cfg.to_dict()}
    if dataset is not None:
        d["exposure"] = {"short_gain": dataset.manifest.get("short_gain"),
                         "long_gain": dataset.manifest.get("long_gain")}
    return d


def load_model(path):
    """(field, TrainConfig) from a checkpoint written by :func:`train`."""
    fld, config = field_from_checkpoint(path)
    cfg = TrainConfig.from_dict(config.get("train", {}))
    return fld, cfg, config


# ---------------------------------------------------------------------------
# rendering and evaluation

def parse_mode(mode):
    """Split "exposure-2" into ("exposure-k", 2); other modes carry no index."""
    if mode.startswith("exposure-"):
        try:
            return "exposure-k", int(mode.split("-", 1)[1])
        except ValueError:
            pass
    elif mode in MODES and mode != "exposure-k":
        return mode, None
    raise ConfigError(f"unknown render mode {mode!r}; choose from raw, exposure-<k>, "
                      "thermal, reflectance, illumination")


def render_views(fld, cameras, mode="raw", cfg=None, gain=1.0, head=0, n_samples=None):
    """Full-frame linear renders, one array per camera.

    raw: composited color at the captured exposure.  exposure-<k>: head k.
    thermal: (H, W).  reflectance: accumulated reflectance.
    illumination: reflectance times ``gain`` times illumination head ``head``.
    """
    cfg = cfg or TrainConfig(heads=fld.heads)
    kind, k = parse_mode(mode)
    if k is not None and not 0 <= k < fld.heads:
        raise ConfigError(f"exposure head {k} out of range (field has {fld.heads})")
    n = n_samples or cfg.eval_samples
    ladder = cfg.ladder.truncated(cfg.active_heads)
    images = []
    for cam in cameras:
        out = render_image(fld, cam, n, bounds=fld.config.bounds)
        if kind == "raw":
            img = composite([out.color[..., i, :] for i in range(cfg.active_heads)], ladder)
        elif kind == "exposure-k":
            img = out.color[..., k, :]
        elif kind == "thermal":
            img = out.thermal
        elif kind == "reflectance":
            img = out.ref
        else:
            img = out.ref * (gain * out.ill[..., head, :])
        images.append(np.asarray(img, dtype=np.float64))
    return images


def write_views(images, out_dir, mode, preview_gain=1.0):
    """Write LRAW plus an 8-bit PPM (color) or PGM (thermal) preview per frame."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for k, img in enumerate(images):
        stem = out / f"frame_{k:03d}_{mode}"
        write_lraw(img, stem.with_suffix(".lraw"))
        g = 1.0 if img.ndim == 2 else preview_gain
        ext = ".pgm" if img.ndim == 2 else ".ppm"
        write_pnm(postprocess(img, gain=g), stem.with_suffix(ext))
        written += [stem.with_suffix(".lraw"), stem.with_suffix(ext)]
    return written


def compare_images(pred, gt):
    """Exposure-match ``pred`` to ``gt`` in linear space, finish both to 8 bit, score.

    Returns (psnr, ssim, dark-region psnr or nan when no dark pixels).
    """
    g = exposure_match_gain(pred, gt)
    a = postprocess(g * pred) / 255.0
    b = postprocess(gt) / 255.0
    dark = gt.mean(axis=-1) < DARK_LEVEL
    dark_psnr = psnr(a, b, mask=dark) if dark.any() else float("nan")
    return psnr(a, b), ssim(a, b), dark_psnr


def evaluate(fld, dataset, cfg=None, split="heldout", views=None, n_samples=None):
    """Per-view metric rows for a split plus a final "mean" row."""
    if views is None:
        views = dataset.indices(split)
    if not views:
        raise ConfigError(f"dataset has no {split!r} views")
    preds = render_views(fld, [dataset.cameras[k] for k in views], "raw", cfg,
                         n_samples=n_samples)
    rows = []
    for k, pred in zip(views, preds):
        p, s, dp = compare_images(pred, dataset.long[k].astype(np.float64))
        rows.append({"view": k, "psnr": p, "ssim": s, "dark_psnr": dp})
    rows.append({"view": "mean", **{key: float(np.nanmean([r[key] for r in rows]))
                                    for key in ("psnr", "ssim", "dark_psnr")}})
    return rows


def write_metrics_csv(rows, path):
    with open(path, "w") as f:
        f.write("view,psnr,ssim,dark_psnr\n")
        for r in rows:
            f.write(f"{r['view']},{r['psnr']:.4f},{r['ssim']:.6f},{r['dark_psnr']:.4f}\n")


def occupancy_iou(fld, scene, resolution=64, threshold=1.0, chunk=65536):
    """IoU between {sigma > threshold} of the field and the scene's primitive occupancy,
    probed at the cell centers of a resolution^3 lattice over the field bounds."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in fld.config.bounds)
    c = (np.arange(resolution) + 0.5) / resolution
    grid = np.stack(np.meshgrid(c, c, c, indexing="ij"), -1).reshape(-1, 3)
    pts = lo + grid * (hi - lo)
    learned = np.empty(len(pts), dtype=bool)
    d = np.broadcast_to(np.array([0.0, 0.0, 1.0]), (min(chunk, len(pts)), 3))
    for s in range(0, len(pts), chunk):
        x = pts[s:s + chunk]
        learned[s:s + chunk] = fld.query(x, d[:len(x)]).sigma > threshold
    truth = scene.occupancy(pts)
    union = np.sum(learned | truth)
    return 1.0 if union == 0 else float(np.sum(learned & truth) / union)


__all__ = ["TrainConfig", "TrainResult", "train", "render_views", "write_views", "evaluate",
           "compare_images", "write_metrics_csv", "occupancy_iou", "load_model", "parse_mode",
           "lr_schedule", "gate_fractions", "batch_loss", "training_rays", "MODES",
           "checkpoint_config"]
