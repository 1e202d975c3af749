"""Folding a float decoder into integer tables, integer-only inference, and
the float64 mirror used to check it.

The graph (``_run``) is written once against a small arithmetic backend.
``_IntOps`` executes it on int64 arrays with shifts and floor division;
``_FloatOps`` executes the same graph on float64 values that are always
exact integers, using ``floor`` in place of shifts. Agreement of the two is
the bit-exactness check, and ``overflow_audit`` keeps every intermediate
below 2^53 so the float mirror stays exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import model as M
from ..errors import ConfigError, ContractError, DimensionError, FoldError
from ..signal import MorletBank, build_morlet_bank, pool_bounds
from . import primitives as P
from .primitives import ADC, QuantSpec, qmax

COMPONENT_BITS = 20  # wavelet responses are shifted down to at most 2^20 per component
MIRROR_EXACT_BITS = 53


@dataclass
class FrontEnd:
    """Float description of the acquisition and wavelet stage."""
    center_freqs_hz: tuple
    sample_rate_hz: float
    n_cycles: float
    n_samples: int
    n_channels: int
    adc_range: float = 8.0

    @classmethod
    def from_bank(cls, bank: MorletBank, n_samples: int, n_channels: int, adc_range: float = 8.0):
        return cls(tuple(bank.center_freqs_hz), bank.sample_rate_hz, bank.n_cycles, n_samples,
                   n_channels, adc_range)

    def bank(self) -> MorletBank:
        return build_morlet_bank(self.center_freqs_hz, self.sample_rate_hz, self.n_cycles)

    def adc(self) -> ADC:
        return ADC(self.adc_range)

    def to_dict(self) -> dict:
        return {"center_freqs_hz": list(self.center_freqs_hz), "sample_rate_hz": self.sample_rate_hz,
                "n_cycles": self.n_cycles, "n_samples": self.n_samples, "n_channels": self.n_channels,
                "adc_range": self.adc_range}

    @classmethod
    def from_dict(cls, d: dict):
        return cls(tuple(d["center_freqs_hz"]), d["sample_rate_hz"], d["n_cycles"], d["n_samples"],
                   d["n_channels"], d.get("adc_range", 8.0))


@dataclass
class ClipSet:
    alphas: dict
    learnable: set = field(default_factory=set)

    def scale(self, site: str, bits: int = 8) -> float:
        return self.alphas[site] / qmax(bits)

    def to_dict(self) -> dict:
        return {"alphas": {k: float(v) for k, v in sorted(self.alphas.items())},
                "learnable": sorted(self.learnable)}

    @classmethod
    def from_dict(cls, d: dict):
        return cls({k: float(v) for k, v in d["alphas"].items()}, set(d["learnable"]))


@dataclass
class QuantizedModel:
    cfg: M.DecoderConfig
    spec: QuantSpec
    clips: ClipSet
    frontend: FrontEnd
    ints: dict  # everything int_infer reads; int64 arrays only
    scales: dict  # float metadata for reporting and dequantization
    report: dict = field(default_factory=dict)
    params: Optional[dict] = None  # float weights the tables were folded from, if kept

    @property
    def out_scale(self) -> float:
        return float(self.scales["out"])

    def dequantize_logits(self, codes) -> np.ndarray:
        return np.asarray(codes, dtype=np.float64) * self.out_scale


# -- folding ---------------------------------------------------------------

def _edge(ints: dict, name: str, ratios, **kw):
    m, e = P.dyadic_array(ratios, **kw)
    ints[name + ".m"], ints[name + ".e"] = m, e


def _site_alpha(clips: ClipSet, site: str) -> float:
    try:
        a = float(clips.alphas[site])
    except KeyError:
        raise FoldError(f"no clip range for site {site!r}") from None
    if not a > 0:
        raise FoldError(f"clip range for {site!r} must be positive")
    return a


def fold(params: dict, cfg: M.DecoderConfig, clips: ClipSet, frontend: FrontEnd,
         spec: QuantSpec = QuantSpec(), audit: bool = True) -> QuantizedModel:
    """Quantize weights per channel and fold every float scale into dyadic edges."""
    if cfg.input_dim != frontend.n_channels * len(frontend.center_freqs_hz):
        raise ConfigError("decoder input_dim must equal channels x wavelet frequencies")
    wb, ab, kb = spec.weight_bits, spec.act_bits, spec.wavelet_kernel_bits
    act_q, res_q = qmax(ab), qmax(spec.residual_bits)
    ints, scales = {}, {}
    s = {}

    def site_scale(site):
        alpha_site = site.replace("attn_div", "v_proj")
        s[site] = _site_alpha(clips, alpha_site) / act_q
        return s[site]

    # acquisition and z-score: z codes carry scale 2^-div_shift
    ints["adc_lut"] = frontend.adc().lookup_table()
    s_z = 2.0 ** -spec.div_shift
    _edge(ints, "zscore", [1.0 / s_z])
    scales["z"] = s_z

    # wavelet bank with 16-bit kernels
    bank = frontend.bank()
    s_f = site_scale("wavelet")
    kq = qmax(kb)
    shifts = []
    s_c = []
    for n, psi in enumerate(bank.kernels):
        sk = max(np.abs(psi.real).max(), np.abs(psi.imag).max()) / kq
        kr = P.quantize_sym(psi.real, kb, sk)
        ki = P.quantize_sym(psi.imag, kb, sk)
        worst = kq * max(int(np.abs(kr).sum()), int(np.abs(ki).sum()))
        sh = max(0, int(worst - 1).bit_length() - COMPONENT_BITS)
        ints[f"cwt.{n}.re"], ints[f"cwt.{n}.im"] = kr, ki
        shifts.append(sh)
        s_c.append(s_z * sk * 2.0**sh)
        scales[f"cwt.{n}.kernel"] = sk
    ints["cwt.shift"] = np.asarray(shifts, dtype=np.int64)
    bounds = pool_bounds(frontend.n_samples, cfg.n_tokens)
    if len(bounds) != cfg.n_tokens:
        raise ConfigError("token count mismatch")
    ints["pool.bounds"] = np.asarray(bounds, dtype=np.int64)
    _edge(ints, "pool", [[sc / ((b - a) * s_f) for sc in s_c] for a, b in bounds])
    scales["wavelet"] = s_f

    def weight(name):
        codes, sw = P.quantize_weight(params[name], wb)
        ints[name] = codes
        scales[name] = sw
        return sw

    # token projection and positional encoding
    sw = weight("W_in")
    s_in = site_scale("input_layer")
    _edge(ints, "input_layer", s_f * sw / s_in)
    sp = weight("pos")
    s_pe = site_scale("positional_encoding")
    _edge(ints, "positional_encoding.x", [s_in / s_pe])
    _edge(ints, "positional_encoding.y", sp / s_pe)
    s_x = s_pe
    alpha_x = _site_alpha(clips, "positional_encoding")

    for i in range(cfg.n_layers):
        p, st = M.layer_prefix(i), M.site_prefix(i)
        for proj, w in (("q_proj", "W_q"), ("k_proj", "W_k"), ("v_proj", "W_v")):
            sw = weight(p + w)
            _edge(ints, st + proj, s_x * sw / site_scale(st + proj))
        s_q, s_k, s_v = s[st + "q_proj"], s[st + "k_proj"], s[st + "v_proj"]
        s_qk = site_scale(st + "qk_mult")
        _edge(ints, st + "qk_mult", [s_q * s_k / s_qk])
        s_den = site_scale(st + "qk_normalizer")
        _edge(ints, st + "qk_normalizer", [s_qk / s_den])
        s_num = site_scale(st + "attn_output")
        _edge(ints, st + "attn_output", [s_qk * s_v / s_num])
        s_att = site_scale(st + "attn_div")
        _edge(ints, st + "attn_div", [s_num / (s_den * s_att)])
        sw = weight(p + "W_o")
        s_o = site_scale(st + "out_proj")
        _edge(ints, st + "out_proj", s_att * sw / s_o)

        alpha_o = _site_alpha(clips, st + "out_proj")
        s_r1 = (alpha_x + alpha_o) / res_q
        _edge(ints, st + "residual.x", [s_x / s_r1])
        _edge(ints, st + "residual.y", [s_o / s_r1])
        s_a = site_scale(st + "residual_ln")
        ln = P.fold_layernorm(params[p + "ln1_g"], params[p + "ln1_b"], s_a, spec.div_shift)
        ints[st + "ln1.m"], ints[st + "ln1.e"], ints[st + "ln1.offset"] = ln.gain_m, ln.gain_e, ln.offset

        sw = weight(p + "W_ff1")
        s_h = site_scale(st + "ffn_hidden")
        _edge(ints, st + "ffn_hidden", s_a * sw / s_h)
        sw = weight(p + "W_ff2")
        s_ff = site_scale(st + "ffn")
        _edge(ints, st + "ffn", s_h * sw / s_ff)
        alpha_a = _site_alpha(clips, st + "residual_ln")
        s_r2 = (alpha_a + _site_alpha(clips, st + "ffn")) / res_q
        _edge(ints, st + "ffn_residual.x", [s_a / s_r2])
        _edge(ints, st + "ffn_residual.y", [s_ff / s_r2])
        s_x = site_scale(st + "ffn_residual_ln")
        ln = P.fold_layernorm(params[p + "ln2_g"], params[p + "ln2_b"], s_x, spec.div_shift)
        ints[st + "ln2.m"], ints[st + "ln2.e"], ints[st + "ln2.offset"] = ln.gain_m, ln.gain_e, ln.offset
        alpha_x = _site_alpha(clips, st + "ffn_residual_ln")

    # classifier on the token sum: bias is pre-scaled by L
    sw = weight("W_s")
    s_cls = site_scale("classifier")
    L = cfg.n_tokens
    bias = np.rint(np.asarray(params["b_s"], dtype=np.float64) * L / (s_x * sw)).astype(np.int64)
    if np.any(np.abs(bias) > qmax(spec.bias_bits)):
        raise FoldError("classifier bias does not fit its 32-bit code")
    ints["b_s"] = bias
    _edge(ints, "classifier", s_x * sw / (L * s_cls))
    scales["out"] = s_cls
    scales.update({"site/" + k: v for k, v in s.items()})

    qm = QuantizedModel(cfg, spec, clips, frontend, ints, scales)
    if audit:
        rep = overflow_audit(qm)
        qm.report["audit"] = rep.to_dict()
        if not rep.ok:
            bad = ", ".join(e["name"] for e in rep.entries if not e["ok"])
            raise FoldError(f"accumulator bound exceeded on: {bad}")
    return qm


# -- arithmetic backends ---------------------------------------------------

class _IntOps:
    dtype = np.int64

    def load(self, a):
        return np.asarray(a, dtype=np.int64)

    def round_shift(self, v, s):
        return (v + ((np.int64(1) << s) >> 1)) >> s

    def lshift(self, v, k):
        return v << k

    def floordiv(self, a, b):
        return a // b

    def isqrt(self, n):
        return P.isqrt(n)


class _FloatOps:
    dtype = np.float64

    def load(self, a):
        return np.asarray(a, dtype=np.float64)

    def round_shift(self, v, s):
        return np.floor(np.ldexp(v, -np.asarray(s, dtype=np.int64)) + 0.5)

    def lshift(self, v, k):
        return np.ldexp(v, np.asarray(k, dtype=np.int64))

    def floordiv(self, a, b):
        return np.floor_divide(a, b)

    def isqrt(self, n):
        r = np.floor(np.sqrt(n))
        r = np.where((r + 1) * (r + 1) <= n, r + 1, r)
        return np.where(r * r > n, r - 1, r)


def _rq(o, v, t, name, lo, hi):
    return np.clip(o.round_shift(v * t[name + ".m"], t[name + ".e"]), lo, hi)


def _div(o, a, b, m, e, shift):
    q = o.floordiv(o.lshift(a * m, shift), np.maximum(b, 1))
    return o.round_shift(q, e + shift)


def _add(o, x, y, t, name):
    mx, ex = t[name + ".x.m"], t[name + ".x.e"]
    my, ey = t[name + ".y.m"], t[name + ".y.e"]
    big = np.maximum(ex, ey)
    acc = o.lshift(x * mx, big - ex) + o.lshift(y * my, big - ey)
    return o.round_shift(acc, big)


def _layernorm(o, x, t, name, q, shift):
    d = x.shape[-1]
    c = d * x - x.sum(axis=-1, keepdims=True)
    r = o.isqrt(o.floordiv((c * c).sum(axis=-1, keepdims=True), d))
    v = o.floordiv(o.lshift(c * t[name + ".m"], shift), np.maximum(r, 1))
    v = o.round_shift(v, t[name + ".e"])
    return np.clip(o.round_shift(v + t[name + ".offset"], shift), -q, q)


def _frontend(o, t, adc, n_freqs: int, shift: int):
    n, T, C = adc.shape
    c = t["adc_lut"][adc]
    S = c.sum(axis=1, keepdims=True)
    V = T * (c * c).sum(axis=1, keepdims=True) - S * S
    r = o.isqrt(V)
    zq = _div(o, T * c - S, r, t["zscore.m"], t["zscore.e"], shift)
    zq = np.clip(zq, -32767, 32767)

    mags = []
    for f in range(n_freqs):
        kr, ki = t[f"cwt.{f}.re"], t[f"cwt.{f}.im"]
        half = (kr.shape[0] - 1) // 2
        sh = t["cwt.shift"][f]
        per = []
        for b in range(n):
            chans = []
            for ch in range(C):
                x = zq[b, :, ch]
                re = o.round_shift(np.convolve(x, kr)[half:half + T], sh)
                im = o.round_shift(np.convolve(x, ki)[half:half + T], sh)
                chans.append(o.isqrt(re * re + im * im))
            per.append(np.stack(chans, axis=-1))
        mags.append(np.stack(per))  # (n, T, C)
    mag = np.stack(mags, axis=1)  # (n, N, T, C)

    bounds = t["pool.bounds"]
    tokens = []
    for l in range(bounds.shape[0]):
        a, b = int(bounds[l, 0]), int(bounds[l, 1])
        pooled = mag[:, :, a:b, :].sum(axis=2)  # (n, N, C)
        m, e = t["pool.m"][l], t["pool.e"][l]
        code = np.clip(o.round_shift(pooled * m[:, None], e[:, None]), 0, 127)
        tokens.append(np.swapaxes(code, 1, 2).reshape(n, -1))  # column c*N + f
    return np.stack(tokens, axis=1)


def _decoder(o, t, cfg: M.DecoderConfig, x, shift: int):
    q = 127
    x = _rq(o, x @ t["W_in"], t, "input_layer", -q, q)
    x = np.clip(_add(o, x, t["pos"], t, "positional_encoding"), -q, q)
    for i in range(cfg.n_layers):
        p, st = M.layer_prefix(i), M.site_prefix(i)
        qp = _rq(o, x @ t[p + "W_q"], t, st + "q_proj", -q, q)
        kp = _rq(o, x @ t[p + "W_k"], t, st + "k_proj", -q, q)
        vp = _rq(o, x @ t[p + "W_v"], t, st + "v_proj", -q, q)
        fq, fk = np.maximum(qp, 0), np.maximum(kp, 0)
        scores = _rq(o, fq @ np.swapaxes(fk, -1, -2), t, st + "qk_mult", -q, q)
        den = _rq(o, scores.sum(axis=-1, keepdims=True), t, st + "qk_normalizer", -q, q)
        num = _rq(o, scores @ vp, t, st + "attn_output", -q, q)
        att = _div(o, num, den, t[st + "attn_div.m"], t[st + "attn_div.e"], shift)
        att = np.clip(att, -q, q)
        out = _rq(o, att @ t[p + "W_o"], t, st + "out_proj", -q, q)
        r1 = np.clip(_add(o, x, out, t, st + "residual"), -32767, 32767)
        a = _layernorm(o, r1, t, st + "ln1", q, shift)
        h = _rq(o, a @ t[p + "W_ff1"], t, st + "ffn_hidden", 0, q)
        f = _rq(o, h @ t[p + "W_ff2"], t, st + "ffn", -q, q)
        r2 = np.clip(_add(o, a, f, t, st + "ffn_residual"), -32767, 32767)
        x = _layernorm(o, r2, t, st + "ln2", q, shift)
    acc = x.sum(axis=1) @ t["W_s"] + t["b_s"]
    return _rq(o, acc, t, "classifier", -q, q)


def _check_adc(qm: QuantizedModel, adc):
    adc = np.asarray(adc)
    if adc.dtype.kind not in "iu":
        raise ContractError("int_infer takes integer ADC codes; map samples through the ADC first")
    batched = adc.ndim == 3
    adc = adc if batched else adc[None]
    fe = qm.frontend
    if adc.ndim != 3 or adc.shape[1:] != (fe.n_samples, fe.n_channels):
        raise DimensionError(f"ADC codes of shape {adc.shape} do not match (T={fe.n_samples}, C={fe.n_channels})")
    top = (1 << qm.spec.adc_bits) - 1
    if adc.size and (adc.min() < 0 or adc.max() > top):
        raise ContractError(f"ADC codes must lie in 0..{top}")
    return adc.astype(np.int64), batched


def _run(qm: QuantizedModel, adc, ops, wrap=None):
    adc, batched = _check_adc(qm, adc)
    t = {k: ops.load(v) for k, v in qm.ints.items()}
    if wrap is not None:
        t = {k: wrap(v) for k, v in t.items()}
        adc = wrap(adc)
    shift = qm.spec.div_shift
    feats = _frontend(ops, t, adc, len(qm.frontend.center_freqs_hz), shift)
    logits = _decoder(ops, t, qm.cfg, feats, shift)
    logits = np.asarray(logits)
    return logits if batched else logits[0]


@dataclass
class InferResult:
    logits: np.ndarray  # classifier codes; multiply by out_scale for real values
    classes: Optional[np.ndarray]
    float_ops: Optional[int] = None


def int_infer(qm: QuantizedModel, adc_codes, trace: bool = False) -> InferResult:
    """Integer-only forward pass from 10-bit ADC codes to classifier codes.

    Ties in the argmax resolve to the lowest class index. With ``trace=True``
    every array is wrapped so that any floating-point ufunc or array function
    touched during the pass is counted.
    """
    if trace:
        with FloatOpTracer() as tracer:
            logits = _run(qm, adc_codes, _IntOps(), wrap=lambda a: a.view(TracedArray))
        n_float = tracer.count
    else:
        logits = _run(qm, adc_codes, _IntOps())
        n_float = None
    logits = np.asarray(logits).view(np.ndarray).astype(np.int64)
    classes = logits.argmax(axis=-1) if qm.cfg.task == "classification" else None
    return InferResult(logits, classes, n_float)


def simulate(qm: QuantizedModel, adc_codes) -> np.ndarray:
    """Float64 mirror of ``int_infer``; returns classifier codes as int64."""
    out = _run(qm, adc_codes, _FloatOps())
    if not np.all(np.isfinite(out)):
        raise FoldError("simulation produced non-finite values")
    return out.astype(np.int64)


# -- float-op tracing ------------------------------------------------------

class FloatOpTracer:
    """Context manager counting floating-point operations on traced arrays."""
    active: list = []

    def __init__(self):
        self.count = 0
        self.ops = []

    def __enter__(self):
        FloatOpTracer.active.append(self)
        return self

    def __exit__(self, *exc):
        FloatOpTracer.active.remove(self)
        return False

    @classmethod
    def record(cls, name):
        for tr in cls.active:
            tr.count += 1
            tr.ops.append(name)


def _is_float(x) -> bool:
    if isinstance(x, (float, complex, np.floating, np.complexfloating)):
        return True
    if isinstance(x, np.ndarray):
        return x.dtype.kind in "fc"
    if isinstance(x, (list, tuple)):
        return any(_is_float(v) for v in x)
    return False


def _unwrap(x):
    if isinstance(x, TracedArray):
        return x.view(np.ndarray)
    if isinstance(x, (list, tuple)):
        return type(x)(_unwrap(v) for v in x)
    if isinstance(x, dict):
        return {k: _unwrap(v) for k, v in x.items()}
    return x


def _wrap(x):
    if isinstance(x, np.ndarray) and not isinstance(x, TracedArray):
        return x.view(TracedArray)
    if isinstance(x, tuple):
        return tuple(_wrap(v) for v in x)
    if isinstance(x, list):
        return [_wrap(v) for v in x]
    return x


class TracedArray(np.ndarray):
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        args = _unwrap(inputs)
        kw = _unwrap(kwargs)
        result = getattr(ufunc, method)(*args, **kw)
        if _is_float(args) or _is_float(result):
            FloatOpTracer.record(ufunc.__name__)
        return _wrap(result)

    def __array_function__(self, func, types, args, kwargs):
        a, kw = _unwrap(args), _unwrap(kwargs)
        result = func(*a, **kw)
        if _is_float(a) or _is_float(list(kw.values())) or _is_float(result):
            FloatOpTracer.record(func.__name__)
        return _wrap(result)


# -- overflow audit --------------------------------------------------------

def accumulator_bound(max_in: int, fan_in: int, max_w: int) -> int:
    """Worst-case |sum_i x_i w_i| for |x| <= max_in, |w| <= max_w over fan_in terms."""
    return int(max_in) * int(fan_in) * int(max_w)


@dataclass
class AuditReport:
    entries: list

    @property
    def ok(self) -> bool:
        return all(e["ok"] for e in self.entries)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "entries": self.entries}


def overflow_audit(qm: QuantizedModel) -> AuditReport:
    """Static worst-case magnitude of every accumulator and rescale product.

    Matmul accumulators are declared 32-bit; widened products are declared
    64-bit but must also stay below 2^53 so the float mirror is exact.
    """
    t, cfg, fe = qm.ints, qm.cfg, qm.frontend
    entries = []
    shift = qm.spec.div_shift

    def check(name, bound, bits):
        bound = int(bound)
        limit = min(2 ** (bits - 1) - 1, 2**MIRROR_EXACT_BITS)
        entries.append({"name": name, "bound": bound, "bits": bits, "ok": bound <= limit})

    def mmax(name):
        return int(np.abs(t[name + ".m"]).max()) if t[name + ".m"].size else 0

    def wmax(name):
        return int(np.abs(t[name]).max()) if t[name].size else 0

    T, L = fe.n_samples, cfg.n_tokens
    half_adc = 1 << (qm.spec.adc_bits - 1)
    u_max = T * 2 * half_adc
    check("zscore.variance", T * T * half_adc * half_adc, 64)
    check("zscore.numerator", (u_max * mmax("zscore")) << shift, 64)
    comp = (1 << COMPONENT_BITS) + 1
    for f in range(len(fe.center_freqs_hz)):
        kmax = max(int(np.abs(t[f"cwt.{f}.re"]).sum()), int(np.abs(t[f"cwt.{f}.im"]).sum()))
        check(f"cwt.{f}.accumulator", accumulator_bound(32767, 1, kmax), 64)
        check(f"cwt.{f}.magnitude_sq", 2 * comp * comp, 64)
    widths = t["pool.bounds"][:, 1] - t["pool.bounds"][:, 0]
    check("pool.product", int(widths.max()) * (comp * 3 // 2) * mmax("pool"), 64)

    q, d = 127, cfg.embed_dim
    acc = accumulator_bound(q, cfg.input_dim, wmax("W_in"))
    check("input_layer.accumulator", acc, 32)
    check("input_layer.product", acc * mmax("input_layer"), 64)
    pe = "positional_encoding"
    big = int(max(t[pe + ".x.e"].max(), t[pe + ".y.e"].max()))
    check(pe + ".sum", (q * (mmax(pe + ".x") + mmax(pe + ".y"))) << big, 64)
    for i in range(cfg.n_layers):
        p, st = M.layer_prefix(i), M.site_prefix(i)
        for proj, w in (("q_proj", "W_q"), ("k_proj", "W_k"), ("v_proj", "W_v"), ("out_proj", "W_o")):
            acc = accumulator_bound(q, d, wmax(p + w))
            check(st + proj + ".accumulator", acc, 32)
            check(st + proj + ".product", acc * mmax(st + proj), 64)
        acc = accumulator_bound(q, d, q)
        check(st + "qk_mult.accumulator", acc, 32)
        check(st + "qk_mult.product", acc * mmax(st + "qk_mult"), 64)
        check(st + "qk_normalizer.product", q * L * mmax(st + "qk_normalizer"), 64)
        acc = accumulator_bound(q, L, q)
        check(st + "attn_output.product", acc * mmax(st + "attn_output"), 64)
        check(st + "attn_div.numerator", (q * mmax(st + "attn_div")) << shift, 64)
        for res in ("residual", "ffn_residual"):
            big = int(max(t[st + res + ".x.e"].max(), t[st + res + ".y.e"].max()))
            check(st + res + ".sum", (q * (mmax(st + res + ".x") + mmax(st + res + ".y"))) << big, 64)
        for ln in ("ln1", "ln2"):
            cmax = 2 * d * 32767
            check(st + ln + ".sum_sq", d * cmax * cmax, 64)
            check(st + ln + ".numerator", (cmax * mmax(st + ln)) << shift, 64)
        acc = accumulator_bound(q, d, wmax(p + "W_ff1"))
        check(st + "ffn_hidden.accumulator", acc, 32)
        check(st + "ffn_hidden.product", acc * mmax(st + "ffn_hidden"), 64)
        acc = accumulator_bound(q, cfg.ffn_dim, wmax(p + "W_ff2"))
        check(st + "ffn.accumulator", acc, 32)
        check(st + "ffn.product", acc * mmax(st + "ffn"), 64)
    acc = accumulator_bound(q * L, d, wmax("W_s")) + int(np.abs(t["b_s"]).max())
    check("classifier.accumulator", acc, 32)
    check("classifier.product", acc * mmax("classifier"), 64)
    return AuditReport(entries)


# -- serialization ---------------------------------------------------------

def to_checkpoint(qm: QuantizedModel, fp_params: Optional[dict] = None):
    from ..io.formats import Checkpoint
    meta = {"spec": qm.spec.to_dict(), "clips": qm.clips.to_dict(), "frontend": qm.frontend.to_dict(),
            "out_scale": qm.out_scale,
            "tensors": {name: {"bits": qm.spec.weight_bits, "scheme": "symmetric-per-channel"}
                        for name in qm.scales if name in qm.ints}}
    qt = {"int/" + k: np.asarray(v, dtype=np.int64) for k, v in qm.ints.items()}
    qt.update({"scale/" + k: np.asarray(v, dtype=np.float64) for k, v in qm.scales.items()})
    return Checkpoint({"decoder": qm.cfg.to_dict(), "kind": "quantized"}, dict(fp_params or {}), meta, qt)


def from_checkpoint(ck) -> QuantizedModel:
    if ck.quant_meta is None:
        raise ConfigError("checkpoint has no quantization section")
    cfg = M.DecoderConfig(**ck.config["decoder"])
    meta = ck.quant_meta
    ints = {k[4:]: v for k, v in ck.quant_tensors.items() if k.startswith("int/")}
    scales = {k[6:]: (float(v) if v.ndim == 0 else v) for k, v in ck.quant_tensors.items()
              if k.startswith("scale/")}
    return QuantizedModel(cfg, QuantSpec(**meta["spec"]), ClipSet.from_dict(meta["clips"]),
                          FrontEnd.from_dict(meta["frontend"]), ints, scales)
