"""Command-line front end: ``python -m tvnerf {gen-data,train,render,eval}``.

Exit codes: 0 ok, 2 usage / bad config, 3 IO or data problems, 4 divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path

from . import synthworld, trainer
from .errors import ConfigError, DivergenceError, FormatError, StateError
from .isp import NoiseModel
from .renderer import Camera

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# config files

def _convert(name, text):
    kinds = {f.name: f.default for f in fields(trainer.TrainConfig)}
    if name not in kinds:
        raise ConfigError(f"unknown config key {name!r}")
    default = kinds[name]
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {text!r}")
    try:
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.replace(",", " ").split())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r}") from None


def parse_config_text(text):
    """Flat ``key = value`` lines; ``#`` starts a comment.  Keys are TrainConfig fields."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = _convert(key, value)
    return values


def resolve_config(file_values=None, flag_values=None):
    """Defaults, then file values, then flags (None means "not given")."""
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    return trainer.TrainConfig(**merged)


@contextmanager
def directory_lock(path):
    """Exclusive lock file; a second command on the same output fails instead of racing."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StateError(f"{path} exists: another command is writing this output") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args):
    if args.preset not in synthworld.PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; available: "
                         + ", ".join(synthworld.PRESETS))
    spec = synthworld.DatasetSpec(views=args.views, heldout=args.heldout, size=args.size,
                                  short_gain=args.short_gain, long_gain=args.long_gain,
                                  noise=NoiseModel(args.noise_shot, args.noise_read),
                                  seed=args.seed, nq=args.nq)
    out = Path(args.out)
    with directory_lock(out / ".lock"):
        summary = synthworld.emit_dataset(synthworld.preset(args.preset), spec, out)
    print(f"wrote {summary['views']} views ({len(summary['files'])} files) to {out}")
    print(f"dark-pixel fraction (short exposure < 0.1): {summary['dark_fraction']:.3f}")
    return EXIT_OK


TRAIN_FLAGS = ("steps", "heads", "gamma", "gains", "seed", "batch", "samples")


def cmd_train(args):
    file_values = parse_config_text(Path(args.config).read_text()) if args.config else {}
    flags = {k: getattr(args, k) for k in TRAIN_FLAGS}
    if flags["gains"] is not None:
        flags["gains"] = _convert("gains", flags["gains"])
    for flag, key in (("no_thermal", "thermal_on"), ("no_retinex", "retinex_on"),
                      ("no_multi_exposure", "multi_exposure_on"),
                      ("no_balanced", "balanced_loss_on")):
        if getattr(args, flag):
            flags[key] = False
    cfg = resolve_config(file_values, flags)
    dataset = synthworld.load_dataset(args.data)
    ckpt = Path(args.out)
    log_path = Path(args.log) if args.log else ckpt.with_suffix(ckpt.suffix + ".log")
    with directory_lock(ckpt.with_suffix(ckpt.suffix + ".lock")):
        try:
            result = trainer.train(dataset, config=cfg, log_path=log_path, ckpt_path=ckpt)
        except DivergenceError as exc:
            print(f"error: {exc} (last finite step {exc.last_finite_step}; "
                  f"parameters saved to {exc.checkpoint})", file=sys.stderr)
            return EXIT_DIVERGED
    final = result.history[-1]["total"] if result.history else float("nan")
    print(f"trained {cfg.steps} steps in {result.seconds:.1f}s; final loss {final:.6g}")
    for step, value in result.validation:
        print(f"  step {step}: held-out PSNR {value:.2f} dB")
    print(f"checkpoint: {ckpt}\nlog: {log_path}")
    return EXIT_OK


def _cameras_from_poses(path):
    data = json.loads(Path(path).read_text())
    entries = data["views"] if isinstance(data, dict) else data
    return [Camera.from_dict(e["camera"] if "camera" in e else e) for e in entries]


def cmd_render(args):
    fld, cfg, meta = trainer.load_model(args.ckpt)
    trainer.parse_mode(args.mode)
    if args.poses:
        cams = _cameras_from_poses(args.poses)
    else:
        cams = synthworld.ring_cameras(args.orbit, args.size)
    exposure = meta.get("exposure") or {}
    preview = 1.0
    if exposure.get("short_gain"):
        preview = exposure["long_gain"] / exposure["short_gain"]
    if args.mode.startswith("exposure-"):
        k = int(args.mode.split("-", 1)[1])
        preview /= cfg.ladder.cumulative_gain(min(k, cfg.ladder.heads - 1))
    out = Path(args.out)
    with directory_lock(out / ".lock"):
        images = trainer.render_views(fld, cams, args.mode, cfg, gain=args.gain, head=args.head,
                                      n_samples=args.samples)
        written = trainer.write_views(images, out, args.mode, preview_gain=preview)
    print(f"rendered {len(images)} frames ({len(written)} files) to {out}")
    return EXIT_OK


def cmd_eval(args):
    fld, cfg, _ = trainer.load_model(args.ckpt)
    dataset = synthworld.load_dataset(args.data)
    rows = trainer.evaluate(fld, dataset, cfg, split=args.split, n_samples=args.samples)
    print(f"{'view':>6} {'PSNR':>8} {'SSIM':>8} {'dark PSNR':>10}")
    for r in rows:
        print(f"{r['view']:>6} {r['psnr']:8.2f} {r['ssim']:8.4f} {r['dark_psnr']:10.2f}")
    csv = Path(args.csv) if args.csv else Path(args.ckpt).with_suffix(".metrics.csv")
    trainer.write_metrics_csv(rows, csv)
    print(f"metrics: {csv}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="tvnerf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="emit a synthetic dataset")
    g.add_argument("--preset", required=True)
    g.add_argument("--views", type=int, default=16, help="total views, held-out included")
    g.add_argument("--heldout", type=int, default=2)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--short-gain", type=float, default=1 / 64)
    g.add_argument("--long-gain", type=float, default=1.0)
    g.add_argument("--noise-shot", type=float, default=NoiseModel.shot)
    g.add_argument("--noise-read", type=float, default=NoiseModel.read)
    g.add_argument("--nq", type=int, default=512, help="oracle quadrature nodes per ray")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit a field to a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log")
    t.add_argument("--steps", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--gamma", type=float)
    t.add_argument("--gains", help="comma-separated amplification factors")
    t.add_argument("--batch", type=int)
    t.add_argument("--samples", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--no-thermal", action="store_true")
    t.add_argument("--no-retinex", action="store_true")
    t.add_argument("--no-multi-exposure", action="store_true")
    t.add_argument("--no-balanced", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render views from a checkpoint")
    r.add_argument("--ckpt", required=True)
    src = r.add_mutually_exclusive_group(required=True)
    src.add_argument("--poses")
    src.add_argument("--orbit", type=int)
    r.add_argument("--size", type=int, default=64, help="frame size for --orbit")
    r.add_argument("--mode", default="raw")
    r.add_argument("--gain", type=float, default=1.0)
    r.add_argument("--head", type=int, default=0, help="illumination head for --mode illumination")
    r.add_argument("--samples", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="score held-out views")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="heldout")
    e.add_argument("--samples", type=int)
    e.add_argument("--csv")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, StateError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
