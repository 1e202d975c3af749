"""Integer building blocks: symmetric quantizers, PACT clipping, dyadic
rescaling, quantized division, integer square root and integer LayerNorm.

Everything that runs at inference time works on int64 numpy arrays. Helpers
that take float scales (``*_scaled`` / ``*_float``) fold them first and are
meant for tests and model folding, not the inference path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, ContractError, FoldError

DIV_SHIFT = 12
MANTISSA_LO = 1 << 14


def qmax(bits: int) -> int:
    return (1 << (bits - 1)) - 1


@dataclass(frozen=True)
class QuantSpec:
    adc_bits: int = 10
    wavelet_kernel_bits: int = 16
    feature_bits: int = 8
    weight_bits: int = 8
    act_bits: int = 8
    bias_bits: int = 32
    dyadic_bits: int = 16
    div_shift: int = DIV_SHIFT
    residual_bits: int = 16

    def __post_init__(self):
        for name in ("adc_bits", "wavelet_kernel_bits", "feature_bits", "weight_bits", "act_bits",
                     "bias_bits", "dyadic_bits", "residual_bits"):
            if not 2 <= getattr(self, name) <= 32:
                raise ConfigError(f"{name} must lie in 2..32")
        if not 0 <= self.div_shift <= 31:
            raise ConfigError("div_shift must lie in 0..31")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# -- float-side quantizers -------------------------------------------------

def quantize_sym(x, bits: int, scale) -> np.ndarray:
    """Round-half-to-even of x/scale, clamped to the symmetric b-bit range."""
    scale = np.asarray(scale, dtype=np.float64)
    if np.any(scale <= 0):
        raise ContractError("quantization scale must be positive")
    q = qmax(bits)
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) / scale), -q, q).astype(np.int64)


def dequantize(codes, scale) -> np.ndarray:
    return np.asarray(codes, dtype=np.float64) * scale


def per_channel_weight_scales(w, bits: int = 8) -> np.ndarray:
    """One scale per output channel (last axis); all-zero channels get scale 1."""
    w = np.asarray(w, dtype=np.float64)
    w2 = w.reshape(-1, w.shape[-1]) if w.ndim > 1 else w[None]
    amax = np.abs(w2).max(axis=0)
    return np.where(amax > 0, amax / qmax(bits), 1.0)


def quantize_weight(w, bits: int = 8):
    scales = per_channel_weight_scales(w, bits)
    return quantize_sym(w, bits, scales), scales


def fake_quant_weight(w, bits: int = 8) -> np.ndarray:
    codes, scales = quantize_weight(w, bits)
    return codes * scales


def pact_clip_forward(x, alpha: float, bits: int = 8, quantize: bool = True):
    """Clip to [-alpha, alpha] and fake-quantize with s = alpha / (2^(b-1) - 1).

    Returns ``(y, mask)`` with mask +1 where x was clipped high, -1 where
    clipped low and 0 in range. ``quantize=False`` keeps only the clamp,
    which is the surrogate whose alpha-derivative the STE rule describes.
    """
    if alpha <= 0:
        raise ContractError("clip range alpha must be positive")
    x = np.asarray(x, dtype=np.float64)
    mask = (x > alpha).astype(np.int8) - (x < -alpha).astype(np.int8)
    y = np.clip(x, -alpha, alpha)
    if quantize:
        s = alpha / qmax(bits)
        y = np.clip(np.rint(y / s), -qmax(bits), qmax(bits)) * s
    return y, mask


def alpha_grad(mask, upstream=None) -> float:
    """STE gradient of a clip range: sum of upstream grads, +1 high, -1 low."""
    mask = np.asarray(mask, dtype=np.float64)
    if upstream is None:
        return float(mask.sum())
    return float((np.asarray(upstream, dtype=np.float64) * mask).sum())


# -- dyadic scales ---------------------------------------------------------

@dataclass(frozen=True)
class DyadicScale:
    m: int
    e: int

    @property
    def value(self) -> float:
        return self.m / float(1 << self.e)


def dyadic_approx(r: float, max_shift: int = 31, allow_zero: bool = False) -> DyadicScale:
    """m / 2^e ~ r with m in [2^14, 2^15] so that m fits 16 bits."""
    r = float(r)
    if r == 0.0 and allow_zero:
        return DyadicScale(0, 0)
    if not (r > 0.0 and math.isfinite(r)):
        raise FoldError(f"cannot fold non-positive or non-finite ratio {r!r}")
    _, x = math.frexp(r)  # r = f * 2^x, f in [0.5, 1)
    e = 15 - x
    if e < 0 or e > max_shift:
        raise FoldError(f"ratio {r:.6g} outside the dyadic range (shift {e} not in 0..{max_shift})")
    m = int(round(r * 2.0**e))
    return DyadicScale(m, e)


def dyadic_array(ratios, max_shift: int = 31, signed: bool = False):
    """Vector of dyadics as ``(m, e)`` int64 arrays; zero ratios fold to m = 0."""
    ratios = np.asarray(ratios, dtype=np.float64)
    m = np.zeros(ratios.shape, dtype=np.int64)
    e = np.zeros(ratios.shape, dtype=np.int64)
    for idx, r in np.ndenumerate(ratios):
        if r < 0 and not signed:
            raise FoldError(f"negative ratio {r} on an unsigned edge")
        d = dyadic_approx(abs(r), max_shift, allow_zero=True)
        m[idx] = d.m if r >= 0 else -d.m
        e[idx] = d.e
    return m, e


# -- integer arithmetic ----------------------------------------------------

def round_shift(v, s):
    """Round-half-up arithmetic right shift: floor(v / 2^s + 1/2); s = 0 is exact."""
    v = np.asarray(v, dtype=np.int64)
    s = np.asarray(s, dtype=np.int64)
    return (v + ((np.int64(1) << s) >> 1)) >> s


def requantize(y, d, bits: int = 8, lo=None, hi=None) -> np.ndarray:
    """(y*m + 2^(e-1)) >> e, saturated to the b-bit symmetric range (or [lo, hi])."""
    m, e = (d.m, d.e) if isinstance(d, DyadicScale) else d
    out = round_shift(np.asarray(y, dtype=np.int64) * np.asarray(m, dtype=np.int64), e)
    q = qmax(bits)
    return np.clip(out, -q if lo is None else lo, q if hi is None else hi)


def int_div(a, b, d, e: int = DIV_SHIFT) -> np.ndarray:
    """Quantized division O ~ A*s_a / (B*s_b*s_o).

    ``d`` is the folded dyadic m/2^ed of s_a/(s_b*s_o). The numerator is
    widened by 2^e before the floor division, so the quotient carries e extra
    fractional bits (per-element error below 2^-e) that are rounded away by
    one final shift of e + ed. Denominators below 1 are floored to 1.
    """
    m, ed = (d.m, d.e) if isinstance(d, DyadicScale) else d
    a = np.asarray(a, dtype=np.int64)
    b = np.maximum(np.asarray(b, dtype=np.int64), 1)
    t = (a * np.asarray(m, dtype=np.int64) << e) // b
    return round_shift(t, np.asarray(ed, dtype=np.int64) + e)


def int_div_scaled(a, s_a: float, b, s_b: float, s_o: float, e: int = DIV_SHIFT) -> np.ndarray:
    return int_div(a, b, dyadic_approx(s_a / (s_b * s_o)), e)


def bit_length(n) -> np.ndarray:
    n = np.asarray(n, dtype=np.int64).copy()
    if np.any(n < 0):
        raise ContractError("bit_length of a negative integer")
    bl = np.zeros(n.shape, dtype=np.int64)
    while np.any(n > 0):
        bl += n > 0
        n >>= 1
    return bl


def isqrt(n) -> np.ndarray:
    """Elementwise floor(sqrt(n)) by Newton iteration on int64.

    Starts from 2^ceil(bits/2) >= sqrt(n) and iterates x' = (x + n//x) >> 1
    while it keeps decreasing.
    """
    n = np.asarray(n, dtype=np.int64)
    if np.any(n < 0):
        raise ContractError("isqrt of a negative integer")
    x = np.int64(1) << ((bit_length(n) + 1) >> 1)
    for _ in range(64):
        y = (x + n // x) >> 1
        done = (y >= x) | (n == 0)
        if np.all(done):
            break
        x = np.where(done, x, y)
    return np.where(n == 0, 0, x)


def int_add(x, dx, y, dy) -> np.ndarray:
    """Sum of two code tensors rescaled into a shared output scale.

    ``dx`` and ``dy`` are dyadics (scalar or per-channel) for s_x/s_out and
    s_y/s_out; both are aligned to the larger shift before one rounding.
    """
    mx, ex = (dx.m, dx.e) if isinstance(dx, DyadicScale) else dx
    my, ey = (dy.m, dy.e) if isinstance(dy, DyadicScale) else dy
    ex, ey = np.asarray(ex, dtype=np.int64), np.asarray(ey, dtype=np.int64)
    big = np.maximum(ex, ey)
    acc = (np.asarray(x, dtype=np.int64) * np.asarray(mx, dtype=np.int64) << (big - ex)) \
        + (np.asarray(y, dtype=np.int64) * np.asarray(my, dtype=np.int64) << (big - ey))
    return round_shift(acc, big)


@dataclass
class FoldedLayerNorm:
    gain_m: np.ndarray  # signed mantissas, one per channel
    gain_e: np.ndarray
    offset: np.ndarray  # round(shift / s_out * 2^DIV_SHIFT), int32 range


def fold_layernorm(gain, shift, out_scale: float, e: int = DIV_SHIFT) -> FoldedLayerNorm:
    gain = np.asarray(gain, dtype=np.float64)
    m, ge = dyadic_array(gain / out_scale, signed=True)
    offset = np.rint(np.asarray(shift, dtype=np.float64) / out_scale * 2.0**e).astype(np.int64)
    if np.any(np.abs(offset) >= 2**31):
        raise FoldError("LayerNorm shift does not fit a 32-bit offset")
    return FoldedLayerNorm(m, ge, offset)


def int_layernorm(x, ln: FoldedLayerNorm, bits: int = 8, e: int = DIV_SHIFT) -> np.ndarray:
    """Integer LayerNorm over the last axis.

    With c = d*x - sum(x) and r = isqrt(sum(c^2) // d) (so c/r is the
    normalized value), each channel computes t = c*g*2^e // r, drops the
    gain's own shift, adds the offset and rounds away the last e bits.
    A constant row has c = 0 and returns the quantized shift.
    """
    x = np.asarray(x, dtype=np.int64)
    d = x.shape[-1]
    c = d * x - x.sum(axis=-1, keepdims=True)
    r = isqrt((c * c).sum(axis=-1, keepdims=True) // d)
    t = (c * ln.gain_m << e) // np.maximum(r, 1)
    t = round_shift(t, ln.gain_e)
    q = qmax(bits)
    return np.clip(round_shift(t + ln.offset, e), -q, q)


def int_layernorm_float(x_int, in_scale: float, gain, shift, out_scale: float, bits: int = 8) -> np.ndarray:
    """Float-signature wrapper: fold gain/shift for ``out_scale`` and run the integer kernel.

    ``in_scale`` is accepted for symmetry; LayerNorm is invariant to it.
    """
    if in_scale <= 0:
        raise ContractError("input scale must be positive")
    return int_layernorm(x_int, fold_layernorm(gain, shift, out_scale), bits)


@dataclass(frozen=True)
class ADC:
    """Affine 10-bit converter mapping [-v, v] onto codes 0..1023."""
    v: float = 8.0
    bits: int = 10

    @property
    def levels(self) -> int:
        return 1 << self.bits

    def convert(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        top = self.levels - 1
        return np.clip(np.rint((x + self.v) / (2 * self.v) * top), 0, top).astype(np.int64)

    def lookup_table(self) -> np.ndarray:
        """Code -> signed sample centered on the mid code."""
        return np.arange(self.levels, dtype=np.int64) - (self.levels // 2)
