"""Multi-exposure compositing: smoothed selection weights, recursive blend, supervision gate.

All functions work per channel on arrays or tape Vars.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


@dataclass(frozen=True)
class ExposureLadder:
    """Amplification ``gains[i-1]`` maps head i-1 onto head i; the base head has gain 1."""
    gains: tuple = (10.0, 10.0, 10.0)
    gamma: float = 0.9
    gate_mode: str = "channel"          # or "pixel": any saturated channel gates the pixel

    def __post_init__(self):
        if any(g <= 0 for g in self.gains):
            raise ConfigError("gains must be positive")
        if not 0 < self.gamma < 1:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.gate_mode not in ("channel", "pixel"):
            raise ConfigError(f"unknown gate mode {self.gate_mode!r}")

    @property
    def heads(self):
        return len(self.gains) + 1

    def gain(self, i):
        """Gain between head i-1 and head i (1 for i = 0)."""
        return 1.0 if i == 0 else float(self.gains[i - 1])

    def cumulative_gain(self, i):
        """Total amplification of head i relative to the captured exposure."""
        return float(np.prod([self.gain(t) for t in range(i + 1)]))

    def truncated(self, heads):
        return ExposureLadder(tuple(self.gains[:heads - 1]), self.gamma, self.gate_mode)


def smooth_sign(c, gain_next, gamma):
    """Probability of keeping head i: clamp(gain_next * c / gamma, 0, 1).

    Equals 1 above gamma, the linear ramp on [0, gamma) and 0 for negative
    amplified values.
    """
    return ad.clamp(c * (gain_next / gamma), 0.0, 1.0)


def hard_sign(c, gain_next, gamma):
    """Unsmoothed 0/1 selection; kept only to demonstrate the discontinuity it causes."""
    return 1.0 - ad.less(c * gain_next, gamma)


def composite(head_colors, ladder, sign=smooth_sign):
    """Blend head colors from the brightest head down to the base exposure.

    ``head_colors`` is a sequence of j+1 arrays/Vars (or an array with the
    head axis first).  Returns the base-exposure estimate.
    """
    heads = [head_colors[i] for i in range(len(head_colors))]
    blended = heads[-1]
    for i in range(len(heads) - 2, -1, -1):
        g = ladder.gain(i + 1)
        f = sign(heads[i], g, ladder.gamma)
        blended = f * heads[i] + (1.0 - f) * blended * (1.0 / g)
    return blended


def gate_mu(i, prev_color, gain_i, mode="channel"):
    """Supervision gate for head i from the detached previous-head prediction.

    1 where ``gain_i * prev`` is below 1 (or for the base head), else 0.
    """
    if i == 0:
        return np.ones_like(ad.value_of(prev_color)) if prev_color is not None else 1.0
    prev = ad.value_of(prev_color)
    mu = (gain_i * prev < 1.0).astype(prev.dtype)
    if mode == "pixel":
        mu = np.broadcast_to(mu.min(axis=-1, keepdims=True), mu.shape).copy()
    return mu
