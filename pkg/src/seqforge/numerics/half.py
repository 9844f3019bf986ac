"""Emulated precisions.

Every tensor stores its values in a float64 array; the dtype only decides
which grid those values are snapped to after each primitive.
"""

import enum

import numpy as np


class DType(enum.Enum):
    FP32 = "fp32"
    FP16E = "fp16e"
    # Verification-only: no rounding at all. Used by gradient checks.
    FP64 = "fp64"


def quantize_fp16(x):
    """Round to the nearest binary16 value (ties to even), widened back.

    Works on scalars and arrays. Overflow goes to signed infinity, values
    below half the smallest subnormal go to signed zero, NaN stays NaN.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.asarray(x, dtype=np.float64).astype(np.float16).astype(np.float64)
    if np.ndim(x) == 0 and not isinstance(x, np.ndarray):
        return float(out)
    return out


def quantize_fp32(x):
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.asarray(x, dtype=np.float64).astype(np.float32).astype(np.float64)
    if np.ndim(x) == 0 and not isinstance(x, np.ndarray):
        return float(out)
    return out


def round_to(dtype: DType, arr):
    if dtype is DType.FP32:
        return quantize_fp32(arr)
    if dtype is DType.FP16E:
        return quantize_fp16(arr)
    return np.asarray(arr, dtype=np.float64)


def on_grid(dtype: DType, arr) -> bool:
    arr = np.asarray(arr, dtype=np.float64)
    return bool(np.array_equal(round_to(dtype, arr), arr, equal_nan=True))
