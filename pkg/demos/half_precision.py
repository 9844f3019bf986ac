"""
Emulated half precision and loss scaling
========================================

Values live in float64 arrays but are snapped to the binary16 grid after
every operation. Small gradients vanish on that grid unless the loss is
scaled up first.
"""

import numpy as np

from seqforge.distributed.scaler import DivergenceError, LossScaler
from seqforge.numerics import quantize_fp16, quantize_fp32

# %% the grid: 1 + 2**-11 is a tie and rounds to even, 65520 overflows, 1e-8 underflows
print(quantize_fp16(np.array([1 + 2**-11, 1 + 3 * 2**-11, 65504.0, 65520.0, 1e-8, 2**-24])))
print(quantize_fp32(np.array([0.1]))[0] - 0.1)

# %% a gradient of 1e-8 disappears at scale 1 but survives at scale 2**10
g = 1e-8
for scale in (1.0, 2.0**10):
    stored = quantize_fp16(g * scale)
    print(f"scale {scale:6g}: stored {stored:.3e}, recovered {stored / scale:.3e}")

# %% the scaler halves on overflow and doubles after `window` clean steps
s = LossScaler(128.0, window=3)
history = []
for overflow in [False, False, False, True, False, True, True]:
    s.update(overflow)
    history.append(s.scale)
print(history)

# %% repeated overflow at the floor is reported rather than looping forever
s = LossScaler(2.0**-4, min_scale=2.0**-5)
try:
    for _ in range(3):
        s.update(True)
except DivergenceError as e:
    print("diverged:", e)
