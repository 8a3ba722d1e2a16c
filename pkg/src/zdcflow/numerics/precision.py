"""Emulated reduced precision: values are rounded to binary16 and kept in f32 storage."""
from __future__ import annotations

import numpy as np

from .tensor import DTYPES, FLOAT16, FLOAT32, Tensor, _result, as_tensor


_F16_MIN_NORMAL = np.float32(2.0**-14)
_F16_OVERFLOW = np.float32(65520.0)  # rounds to inf from here up


def round_f16(a: np.ndarray) -> np.ndarray:
    """Round f32 values to the nearest binary16 value (ties to even), returned as f32."""
    a = np.ascontiguousarray(a, dtype=np.float32)
    # In the f16 normal range rounding is just dropping 13 mantissa bits with
    # a ties-to-even carry, done on the integer view. Subnormals, overflow and
    # non-finite values go through numpy's IEEE cast instead.
    bits = a.view(np.uint32)
    carry = np.uint32(0xFFF) + ((bits >> np.uint32(13)) & np.uint32(1))
    out = ((bits + carry) & np.uint32(0xFFFFE000)).view(np.float32)
    mag = np.abs(a)
    rare = ~((mag >= _F16_MIN_NORMAL) & (mag < _F16_OVERFLOW))
    if rare.any():
        with np.errstate(over="ignore"):  # overflow to inf is the IEEE result
            out[rare] = a[rare].astype(np.float16).astype(np.float32)
    return out


def cast_precision(t, dtype: str) -> Tensor:
    """Cast to ``dtype``; the f16 path is a straight-through rounding for gradients."""
    t = as_tensor(t)
    if dtype not in DTYPES:
        raise ValueError(f"unknown dtype {dtype!r}")
    if dtype == FLOAT32:
        out = _result(t.data, (t,), lambda g: (g,))
        return out
    out = _result(round_f16(t.data), (t,), lambda g: (g,))
    out.dtype = FLOAT16
    return out


def f16_reference(x: float) -> float:
    """Bit-level f32 -> f16 conversion (round-to-nearest-even), for testing ``round_f16``."""
    bits = int(np.array(x, dtype=np.float32).view(np.uint32))
    sign = (bits >> 31) & 1
    exp = (bits >> 23) & 0xFF
    man = bits & 0x7FFFFF
    if exp == 0xFF:
        h = (sign << 15) | 0x7C00 | (0x200 if man else 0)
    else:
        e = exp - 127 + 15
        if e >= 0x1F:
            h = (sign << 15) | 0x7C00
        elif e <= 0:
            # subnormal half: shift mantissa with the implicit bit
            if e < -10:
                h = sign << 15
            else:
                full = man | 0x800000
                shift = 14 - e
                half_man = full >> shift
                rem = full & ((1 << shift) - 1)
                halfway = 1 << (shift - 1)
                if rem > halfway or (rem == halfway and half_man & 1):
                    half_man += 1
                h = (sign << 15) | half_man
        else:
            half_man = man >> 13
            rem = man & 0x1FFF
            h = (sign << 15) | (e << 10) | half_man
            if rem > 0x1000 or (rem == 0x1000 and half_man & 1):
                h += 1  # carry may roll into the exponent, which is correct
    return float(np.array(h, dtype=np.uint16).view(np.float16))
