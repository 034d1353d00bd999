"""Affine INT8 quantization primitives and MSE-optimal parameter search."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import EmptyCalibration

QMIN, QMAX = -128, 127
S_MIN = 1e-8
N_SCALES = 120
SCALE_SPAN = (0.25, 1.2)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        if not (QMIN <= self.zero_point <= QMAX) or int(self.zero_point) != self.zero_point:
            raise ValueError(f"zero_point {self.zero_point} outside [{QMIN}, {QMAX}]")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "zero_point", int(self.zero_point))


@dataclass
class QuantTensor:
    data: np.ndarray        # int8
    params: QuantParams

    @property
    def shape(self):
        return self.data.shape

    def dequantize(self):
        return dequantize(self.data, self.params)


def quantize(x, params: QuantParams) -> np.ndarray:
    """q = clamp(round_half_even(x / s) + z, -128, 127) as int8."""
    q = np.rint(np.asarray(x, dtype=np.float64) / params.scale) + params.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def dequantize(q, params: QuantParams) -> np.ndarray:
    return params.scale * (np.asarray(q, dtype=np.float64) - params.zero_point)


def quantize_tensor(x, params: QuantParams) -> QuantTensor:
    return QuantTensor(quantize(x, params), params)


def _zero_point(lo, s):
    return int(np.clip(np.rint(-lo / s) - 128, QMIN, QMAX))


def minmax_params(lo: float, hi: float) -> QuantParams:
    """Scale spanning [lo, hi] over 255 steps, zero point aligning lo with -128."""
    s = max((hi - lo) / 255.0, S_MIN)
    return QuantParams(s, _zero_point(lo, s))


def quant_mse(x, params: QuantParams) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean((x - dequantize(quantize(x, params), params)) ** 2))


def _degenerate(c):
    if c == 0:
        return QuantParams(S_MIN, 0)
    # power-of-two divisor keeps s * 64 == |c| exact
    return QuantParams(max(abs(c) / 64.0, S_MIN), 0)


def calibrate_mse(samples) -> QuantParams:
    """Grid search for the (scale, zero point) minimizing reconstruction MSE.

    Candidates: the min-max scale plus 120 scales spaced geometrically over
    [0.25, 1.2] x (max - min) / 255, each paired with the range-aligned zero
    point and with zero point 0. The first minimum wins.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    x = x[np.isfinite(x)]
    if x.size == 0:
        raise EmptyCalibration("no finite calibration samples")
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return _degenerate(lo)
    base = (hi - lo) / 255.0
    scales = np.concatenate([[base], np.geomspace(*SCALE_SPAN, N_SCALES) * base])
    scales = np.maximum(scales, S_MIN)
    cands = []
    for s in scales:
        cands.append((s, _zero_point(lo, s)))
        cands.append((s, 0))
    s_arr = np.array([c[0] for c in cands])[:, None]
    z_arr = np.array([c[1] for c in cands], dtype=np.float64)[:, None]
    q = np.clip(np.rint(x[None, :] / s_arr) + z_arr, QMIN, QMAX)
    err = np.mean((x[None, :] - s_arr * (q - z_arr)) ** 2, axis=1)
    best = int(np.argmin(err))
    return QuantParams(float(cands[best][0]), int(cands[best][1]))


# -- fixed-point multipliers ---------------------------------------------------------

MANTISSA_BITS = 31
MAX_SHIFT = 62


def quantize_multiplier(m: float):
    """Encode a positive real multiplier as (mantissa, shift) with m ~= mantissa * 2**-shift.

    The mantissa lies in [2**30, 2**31) unless m is so small that the shift
    saturates at 62. Multipliers must stay below 2**30.
    """
    if not (m >= 0 and math.isfinite(m)):
        raise ValueError(f"multiplier must be finite and non-negative, got {m}")
    if m == 0:
        return 0, 1
    frac, exp = math.frexp(m)              # m = frac * 2**exp, frac in [0.5, 1)
    mant = round(frac * (1 << MANTISSA_BITS))
    if mant == 1 << MANTISSA_BITS:
        mant //= 2
        exp += 1
    shift = MANTISSA_BITS - exp
    if shift < 1:
        raise ValueError(f"multiplier {m} too large for fixed-point encoding")
    if shift > MAX_SHIFT:
        mant = round(m * 2.0 ** MAX_SHIFT)
        shift = MAX_SHIFT
    return int(mant), int(shift)


def multiplier_value(mant: int, shift: int) -> float:
    return mant * 2.0 ** -shift


def common_shift_multipliers(ma: float, mb: float):
    """Two multipliers sharing the shift of the larger one: (mant_a, mant_b, shift)."""
    big = max(ma, mb)
    _, shift = quantize_multiplier(big)
    return int(round(ma * 2.0 ** shift)), int(round(mb * 2.0 ** shift)), shift
