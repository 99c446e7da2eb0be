"""Software IEEE 754 binary16 conversion.

binary16 packs 1 sign bit, 5 exponent bits, and 10 significand bits
(exponent bias 15, max finite 65504, min normal 2^-14, min subnormal 2^-24).
Encoding rounds to nearest, ties to even; values beyond the finite range
overflow to signed infinity; NaN payloads are preserved (truncated to the
top 10 significand bits, forced non-zero). Decoding is exact.

Both directions are implemented with integer bit manipulation on the
binary32 representation and are vectorized over numpy arrays; scalars in,
scalars out.
"""

from __future__ import annotations

import numpy as np

__all__ = ["fp32_to_fp16", "fp16_to_fp32"]

_F32_SIGN = np.uint32(0x8000_0000)
_F32_EXP = np.uint32(0x7F80_0000)
_F32_SIG = np.uint32(0x007F_FFFF)


def _encode_bits(f: np.ndarray) -> np.ndarray:
    """binary32 bit patterns (uint32) -> binary16 bit patterns (uint16)."""
    f = f.astype(np.uint32, copy=False)
    sign = ((f & _F32_SIGN) >> np.uint32(16)).astype(np.uint32)
    exp = (f & _F32_EXP) >> np.uint32(23)  # biased binary32 exponent
    sig = f & _F32_SIG

    out = np.zeros(f.shape, dtype=np.uint32)

    # inf / nan: exponent all ones
    is_inf_nan = exp == 255
    nan = is_inf_nan & (sig != 0)
    out[is_inf_nan] = 0x7C00
    if nan.any():
        payload = (sig[nan] >> np.uint32(13)).astype(np.uint32)
        payload[payload == 0] = 1  # keep it a nan after truncation
        out[nan] = np.uint32(0x7C00) | payload

    # unbiased exponent; half's normal range is [-14, 15]
    e = exp.astype(np.int32) - 127

    # overflow to inf: anything that rounds to >= 2^16.
    # 65504 + half an ulp (16) is the smallest magnitude that rounds up to inf.
    finite = ~is_inf_nan
    big = finite & (e >= 16)
    out[big] = 0x7C00

    # normal half range; may still round up into inf, handled by carry below
    norm = finite & (e >= -14) & (e <= 15)
    if norm.any():
        he = (e[norm] + 15).astype(np.uint32)
        hs = sig[norm]
        half = (he << np.uint32(10)) | (hs >> np.uint32(13))
        rest = hs & np.uint32(0x1FFF)  # 13 dropped bits
        round_up = (rest > 0x1000) | ((rest == 0x1000) & ((half & np.uint32(1)) == 1))
        # carry out of the significand bumps the exponent; carry out of the
        # exponent field produces the infinity pattern 0x7C00, as required
        out[norm] = half + round_up.astype(np.uint32)

    # subnormal half (or zero): magnitude below 2^-14. The value equals
    # full * 2^(e-23) with full the 24-bit significand, i.e. an integer
    # multiple of the half ulp 2^-24 after shifting right by -e-1 bits.
    sub = finite & (e < -14)
    if sub.any():
        full = sig[sub] | np.uint32(0x0080_0000)
        # binary32 subnormal inputs lack the implicit bit this sets, but they
        # are below 2^-126 and the capped shift rounds them to zero anyway
        shift = np.minimum(-e[sub] - 1, 26).astype(np.uint32)  # >= 14
        kept = full >> shift
        dropped = full & ((np.uint32(1) << shift) - np.uint32(1))
        half_pt = np.uint32(1) << (shift - np.uint32(1))
        round_up = (dropped > half_pt) | (
            (dropped == half_pt) & ((kept & np.uint32(1)) == 1)
        )
        # a carry out of the 10 significand bits lands on the minimum normal
        # encoding, which is exactly the right value
        out[sub] = kept + round_up.astype(np.uint32)

    out |= sign
    return out.astype(np.uint16)


def _decode_bits(h: np.ndarray) -> np.ndarray:
    """binary16 bit patterns (uint16) -> binary32 bit patterns (uint32)."""
    h = h.astype(np.uint32, copy=False)
    sign = (h & np.uint32(0x8000)) << np.uint32(16)
    exp = (h >> np.uint32(10)) & np.uint32(0x1F)
    sig = h & np.uint32(0x3FF)

    out = sign.copy()

    # normals: rebias exponent 15 -> 127
    norm = (exp != 0) & (exp != 31)
    out[norm] |= ((exp[norm] + np.uint32(112)) << np.uint32(23)) | (sig[norm] << np.uint32(13))

    # subnormals: value = sig * 2^-24; normalize into binary32
    sub = (exp == 0) & (sig != 0)
    if sub.any():
        s = sig[sub]
        sh = np.zeros(s.shape, dtype=np.uint32)
        v = s.copy()
        while (v < 0x400).any():
            mask = v < 0x400
            v[mask] <<= np.uint32(1)
            sh[mask] += np.uint32(1)
        # leading bit of v is now the implicit one at position 10
        e32 = (np.uint32(127 - 15 + 1) - sh).astype(np.uint32)
        out[sub] |= (e32 << np.uint32(23)) | ((v & np.uint32(0x3FF)) << np.uint32(13))

    # inf / nan
    inf_nan = exp == 31
    out[inf_nan] |= np.uint32(0x7F80_0000) | (sig[inf_nan] << np.uint32(13))

    return out


def fp32_to_fp16(value):
    """Encode float32 value(s) to binary16 bit patterns (uint16)."""
    arr = np.asarray(value, dtype=np.float32)
    bits = _encode_bits(arr.reshape(-1).view(np.uint32)).reshape(arr.shape)
    if np.isscalar(value) or arr.ndim == 0:
        return int(bits) if bits.ndim == 0 else bits
    return bits


def fp16_to_fp32(pattern):
    """Decode binary16 bit pattern(s) (uint16) to float32 value(s)."""
    arr = np.asarray(pattern, dtype=np.uint16)
    vals = _decode_bits(arr.reshape(-1)).view(np.float32).reshape(arr.shape)
    if np.isscalar(pattern) or arr.ndim == 0:
        return float(vals) if vals.ndim == 0 else vals
    return vals
