from __future__ import annotations

import math
from dataclasses import dataclass


class DivergenceError(RuntimeError):
    """Loss scale fell below its floor; training cannot continue."""


@dataclass
class LossScaler:
    """Dynamic power-of-two loss scale.

    Halve on overflow, double after ``window`` consecutive clean steps.
    """

    scale: float = 2.0**7
    window: int = 256
    min_scale: float = 2.0**-5
    max_scale: float = 2.0**15
    counter: int = 0
    overflows: int = 0

    def __post_init__(self):
        for v in (self.scale, self.min_scale, self.max_scale):
            m, _ = math.frexp(v)
            if m != 0.5:
                raise ValueError(f"loss scale bounds must be powers of two, got {v}")
        if not self.min_scale <= self.scale <= self.max_scale:
            raise ValueError("initial scale outside [min_scale, max_scale]")

    def update(self, overflowed: bool) -> LossScaler:
        if overflowed:
            self.overflows += 1
            self.counter = 0
            if self.scale / 2 < self.min_scale:
                raise DivergenceError(
                    f"loss scale would drop to {self.scale / 2} (< min {self.min_scale}); gradients keep overflowing"
                )
            self.scale /= 2
        else:
            self.counter += 1
            if self.counter >= self.window:
                self.scale = min(self.scale * 2, self.max_scale)
                self.counter = 0
        return self

    def state_dict(self) -> dict:
        return {
            "scale": self.scale,
            "window": self.window,
            "min_scale": self.min_scale,
            "max_scale": self.max_scale,
            "counter": self.counter,
            "overflows": self.overflows,
        }

    @classmethod
    def from_state(cls, d: dict) -> LossScaler:
        return cls(
            float(d["scale"]),
            int(d["window"]),
            float(d["min_scale"]),
            float(d["max_scale"]),
            int(d["counter"]),
            int(d.get("overflows", 0)),
        )


def loss_scaler_update(scaler: LossScaler, overflowed: bool) -> LossScaler:
    return scaler.update(overflowed)
