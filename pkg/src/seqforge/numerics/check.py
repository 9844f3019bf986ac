"""Finite-difference gradient checking."""

from typing import Callable, Iterable, Optional

import numpy as np


class NonFiniteProbe(ArithmeticError):
    """The function returned a non-finite value at a probe point."""


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta: np.ndarray,
    h: float = 1e-3,
    coords: Optional[Iterable[int]] = None,
) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``f`` maps a flat parameter vector to ``(value, gradient)``. Only the
    value is used at the probe points.
    """
    if h <= 0:
        raise ValueError("step size must be positive")
    theta = np.array(theta, dtype=np.float64).reshape(-1)
    value, grad = f(theta)
    if not np.isfinite(value):
        raise NonFiniteProbe(f"non-finite value {value} at the base point")
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    worst = 0.0
    for i in range(theta.size) if coords is None else coords:
        probe = theta.copy()
        probe[i] = theta[i] + h
        up, _ = f(probe)
        probe[i] = theta[i] - h
        down, _ = f(probe)
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteProbe(f"non-finite value at coordinate {i}")
        fd = (up - down) / (2.0 * h)
        err = abs(grad[i] - fd) / max(1.0, abs(grad[i]))
        worst = max(worst, err)
    return worst
