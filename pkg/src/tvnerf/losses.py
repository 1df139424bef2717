"""Training objectives: thermal MSE, thermal-weighted balanced loss, gated per-exposure losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class LossWeights:
    lambda_t: float = 1.0
    lambda_b: float = 1.0
    lambda_i: tuple = (1.0,)        # a single entry is reused for every head
    epsilon: float = 1e-3
    w_min: float = 0.1

    def __post_init__(self):
        if min(self.lambda_t, self.lambda_b, *self.lambda_i) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")
        if not 0 <= self.w_min <= 1:
            raise ConfigError("w_min must lie in [0, 1]")

    def head_weight(self, i):
        return float(self.lambda_i[i] if i < len(self.lambda_i) else self.lambda_i[-1])


def _same_shape(a, b):
    sa, sb = np.shape(ad.value_of(a)), np.shape(ad.value_of(b))
    if sa != sb:
        raise ShapeError(f"shape mismatch: {sa} vs {sb}")


def thermal_loss(pred, target):
    _same_shape(pred, target)
    r = pred - np.asarray(target)
    return ad.mean(r * r)


def balanced_loss(pred, target, thermal=None, epsilon=1e-3, w_min=0.1):
    """Mean of ((pred - target) / (sg(pred) + eps) * max(sg(thermal), w_min))^2.

    Only the numerator carries gradient.  ``thermal`` (R,) is broadcast over
    the color channels; pass None for the unweighted loss.
    """
    _same_shape(pred, target)
    r = (pred - np.asarray(target)) / (ad.stop_gradient(pred) + epsilon)
    if thermal is not None:
        w = ad.maximum(ad.stop_gradient(thermal), w_min)
        r = r * ad.reshape(w, np.shape(ad.value_of(thermal)) + (1,))
    return ad.mean(r * r)


def exposure_loss(i, pred_i, target, ladder, mu):
    """Mean of (mu * pred_i - mu * G_i * target)^2 with G_i the cumulative gain of head i."""
    _same_shape(pred_i, target)
    mu = np.asarray(mu)
    r = mu * pred_i - mu * (ladder.cumulative_gain(i) * np.asarray(target))
    return ad.mean(r * r)


def total_loss(components, weights):
    """Weighted sum of named components.

    ``components`` maps "L_t", "L_b", "L_0", "L_1", ... to scalars or Vars;
    missing terms are skipped.  Returns ``(total, breakdown)`` where the
    breakdown holds plain floats, total first.
    """
    total = 0.0
    breakdown = {}
    for name, value in components.items():
        if name == "L_t":
            lam = weights.lambda_t
        elif name == "L_b":
            lam = weights.lambda_b
        elif name.startswith("L_"):
            lam = weights.head_weight(int(name[2:]))
        else:
            raise ConfigError(f"unknown loss component {name!r}")
        total = total + lam * value
        breakdown[name] = float(ad.value_of(value))
    return total, {"total": float(ad.value_of(total)), **breakdown}


def log_header(columns):
    return "# step " + " ".join(columns)


def log_line(step, breakdown, gate_fraction, columns):
    vals = [f"{breakdown[c]:.6e}" for c in columns if c != "gate"]
    return f"{step} " + " ".join(vals) + f" {gate_fraction:.4f}"
