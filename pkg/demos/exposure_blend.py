"""Why the blend between exposure heads uses a ramp instead of a step.

    python demos/exposure_blend.py

Sweeps the base head's value across the switching point and prints the
composited color for the smooth and the hard selection function.  With a
consistent ladder (next head = gain * base) both return the base value; with
an inconsistent next head only the ramp avoids a jump.
"""
import numpy as np

from tvnerf.exposure import ExposureLadder, composite, hard_sign, smooth_sign

ladder = ExposureLadder((10.0,), gamma=0.9)
switch = ladder.gamma / ladder.gain(1)
print(f"switch point c = gamma / gain = {switch:.3f}")
print("   c0     consistent   smooth(next=0.3)   hard(next=0.3)")
for c in np.linspace(0.0, 0.14, 15):
    heads = [np.array(c), np.array(0.3)]
    consistent = composite([np.array(c), np.array(10 * c)], ladder)
    print(f"{c:6.3f}   {float(consistent):8.4f}     {float(composite(heads, ladder)):8.4f}"
          f"           {float(composite(heads, ladder, sign=hard_sign)):8.4f}")

eps = 1e-9
for name, sign in (("smooth", smooth_sign), ("hard", hard_sign)):
    lo = composite([np.array(switch - eps), np.array(0.3)], ladder, sign=sign)
    hi = composite([np.array(switch + eps), np.array(0.3)], ladder, sign=sign)
    print(f"{name:6s} jump across the switch point: {abs(float(hi - lo)):.2e}")
