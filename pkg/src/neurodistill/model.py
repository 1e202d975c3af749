"""The compact linear-attention decoder: forward pass and hand-written backward pass.

Parameters live in a flat ``dict[str, np.ndarray]``::

    W_in, pos,
    layers.{i}.W_q / W_k / W_v / W_o, ln1_g, ln1_b, W_ff1, W_ff2, ln2_g, ln2_b,
    W_s, b_s

Only the classifier head carries a bias. Every block is post-norm:
``a = LN(x + attn(x) W_o)`` followed by ``x' = LN(a + relu(a W_ff1) W_ff2)``.

``forward`` optionally takes a quantization hook object (see
:mod:`neurodistill.quant.qat`) that fake-quantizes weights and clips
activations at named sites; ``backward`` then applies the straight-through
masks and reports clip-range gradients under ``alpha/<site>`` keys.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

ATTN_EPS = 1e-6
LN_EPS = 1e-5

LAYER_WEIGHTS = ("W_q", "W_k", "W_v", "W_o", "W_ff1", "W_ff2")
LAYER_NORMS = ("ln1_g", "ln1_b", "ln2_g", "ln2_b")


@dataclass(frozen=True)
class DecoderConfig:
    input_dim: int
    out_dim: int
    embed_dim: int = 32
    ffn_dim: int = 128
    n_layers: int = 2
    n_tokens: int = 10
    task: str = "classification"

    def __post_init__(self):
        for name in ("input_dim", "out_dim", "embed_dim", "ffn_dim", "n_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.task not in ("classification", "regression"):
            raise ConfigError(f"unknown task {self.task!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def layer_prefix(i: int) -> str:
    return f"layers.{i}."


def site_prefix(i: int) -> str:
    return f"layer{i + 1}."


def param_shapes(cfg: DecoderConfig) -> dict:
    d, f = cfg.embed_dim, cfg.ffn_dim
    shapes = {"W_in": (cfg.input_dim, d), "pos": (cfg.n_tokens, d)}
    for i in range(cfg.n_layers):
        p = layer_prefix(i)
        for w in ("W_q", "W_k", "W_v", "W_o"):
            shapes[p + w] = (d, d)
        shapes[p + "ln1_g"] = (d,)
        shapes[p + "ln1_b"] = (d,)
        shapes[p + "W_ff1"] = (d, f)
        shapes[p + "W_ff2"] = (f, d)
        shapes[p + "ln2_g"] = (d,)
        shapes[p + "ln2_b"] = (d,)
    shapes["W_s"] = (d, cfg.out_dim)
    shapes["b_s"] = (cfg.out_dim,)
    return shapes


def param_count(cfg: DecoderConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def is_decayed(name: str) -> bool:
    """Weight decay applies to weight matrices only (not pos, LN or the bias)."""
    return name.rsplit(".", 1)[-1].startswith("W_")


def init_params(cfg: DecoderConfig, rng: np.random.Generator) -> dict:
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("W_"):
            params[name] = rng.standard_normal(shape) / np.sqrt(shape[0])
        elif leaf == "pos":
            params[name] = 0.02 * rng.standard_normal(shape)
        elif leaf.endswith("_g"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def fingerprint(params: dict) -> int:
    crc = 0
    for name in sorted(params):
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(np.ascontiguousarray(params[name]).tobytes(), crc)
    return crc


def zeros_like(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def linear_attention(q, k, v, eps: float = ATTN_EPS) -> np.ndarray:
    """ReLU-kernel linear attention evaluated in softmax order.

    ``out_i = sum_j s_ij v_j / (sum_j s_ij + eps)`` with
    ``s_ij = relu(q_i) . relu(k_j)``; works on (L, d) or (B, L, d) inputs.
    """
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if q.shape != k.shape or q.shape[:-2] != v.shape[:-2] or q.shape[-2] != v.shape[-2]:
        raise DimensionError(f"incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    s = np.maximum(q, 0) @ np.swapaxes(np.maximum(k, 0), -1, -2)
    return (s @ v) / (s.sum(-1, keepdims=True) + eps)


def _ln_forward(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xh = xc * inv
    return xh * g + b, (xh, inv)


def _ln_backward(dy, g, cache):
    xh, inv = cache
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    return dx, (dy * xh).reshape(-1, xh.shape[-1]).sum(0), dy.reshape(-1, xh.shape[-1]).sum(0)


def _sum_outer(a, b):
    """sum over batch and tokens of a^T b, i.e. a weight gradient."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


@dataclass
class ForwardTrace:
    cache: dict
    masks: dict
    z: np.ndarray  # (B, d) pooled embedding
    logits: np.ndarray  # (B, K)
    fingerprint: int
    batched: bool
    quant: object = None

    @property
    def z_s(self):
        return self.z if self.batched else self.z[0]

    @property
    def out(self):
        return self.logits if self.batched else self.logits[0]


def forward(params: dict, cfg: DecoderConfig, tokens, quant=None) -> ForwardTrace:
    tokens = np.asarray(tokens, dtype=np.float64)
    batched = tokens.ndim == 3
    x0 = tokens if batched else tokens[None]
    if x0.ndim != 3 or x0.shape[1:] != (cfg.n_tokens, cfg.input_dim):
        raise DimensionError(
            f"tokens of shape {tokens.shape} do not match (L={cfg.n_tokens}, D={cfg.input_dim})")

    weights = {}
    masks = {}

    def w(name):
        if name not in weights:
            weights[name] = quant.weight(name, params[name]) if quant is not None else params[name]
        return weights[name]

    def q(site, x):
        if quant is None:
            return x
        y, m = quant.act(site, x)
        masks[site] = m
        return y

    cache = {"weights": weights}
    t = q("wavelet", x0)
    cache["t"] = t
    x = q("input_layer", t @ w("W_in"))
    x = q("positional_encoding", x + w("pos"))

    layers = []
    for i in range(cfg.n_layers):
        p, s = layer_prefix(i), site_prefix(i)
        lc = {"x": x}
        qp = q(s + "q_proj", x @ w(p + "W_q"))
        kp = q(s + "k_proj", x @ w(p + "W_k"))
        vp = q(s + "v_proj", x @ w(p + "W_v"))
        fq, fk = np.maximum(qp, 0), np.maximum(kp, 0)
        scores = q(s + "qk_mult", fq @ fk.transpose(0, 2, 1))
        den = q(s + "qk_normalizer", scores.sum(-1))
        num = q(s + "attn_output", scores @ vp)
        attn = q(s + "attn_div", num / (den[..., None] + ATTN_EPS))
        o = q(s + "out_proj", attn @ w(p + "W_o"))
        a, ln1 = _ln_forward(x + o, w(p + "ln1_g"), w(p + "ln1_b"))
        a = q(s + "residual_ln", a)
        u = a @ w(p + "W_ff1")
        hdn = q(s + "ffn_hidden", np.maximum(u, 0))
        f = q(s + "ffn", hdn @ w(p + "W_ff2"))
        x, ln2 = _ln_forward(a + f, w(p + "ln2_g"), w(p + "ln2_b"))
        x = q(s + "ffn_residual_ln", x)
        lc.update(qp=qp, kp=kp, vp=vp, fq=fq, fk=fk, scores=scores, den=den, num=num,
                  attn=attn, ln1=ln1, a=a, u=u, hdn=hdn, ln2=ln2)
        layers.append(lc)
    cache["layers"] = layers
    cache["x_last"] = x

    z = x.mean(axis=1)
    logits = q("classifier", z @ w("W_s") + params["b_s"])
    return ForwardTrace(cache, masks, z, logits, fingerprint(params), batched, quant)


def backward(trace: ForwardTrace, params: dict, cfg: DecoderConfig, loss_grad, z_grad=None) -> dict:
    """Gradients of a loss w.r.t. every parameter.

    ``loss_grad`` is dLoss/dlogits (shape (K,) or (B, K)); ``z_grad`` optionally
    adds dLoss/dz for losses that act on the pooled embedding directly.
    """
    if trace.fingerprint != fingerprint(params):
        raise ContractError("trace was produced with different parameters (stale trace)")
    quant = trace.quant
    cache, weights = trace.cache, trace.cache["weights"]
    grads = zeros_like(params)

    def back(site, dy):
        m = trace.masks.get(site)
        if m is None:
            return dy
        if quant.learnable(site):
            key = "alpha/" + site
            grads[key] = grads.get(key, 0.0) + float((dy * m).sum())
        return dy * (m == 0)

    dlog = np.asarray(loss_grad, dtype=np.float64).reshape(trace.logits.shape)
    dlog = back("classifier", dlog)
    grads["b_s"] = dlog.sum(0)
    grads["W_s"] = trace.z.T @ dlog
    dz = dlog @ weights["W_s"].T
    if z_grad is not None:
        dz = dz + np.asarray(z_grad, dtype=np.float64).reshape(dz.shape)
    dx = np.repeat(dz[:, None, :] / cfg.n_tokens, cfg.n_tokens, axis=1)

    for i in reversed(range(cfg.n_layers)):
        p, s = layer_prefix(i), site_prefix(i)
        lc = cache["layers"][i]
        dx = back(s + "ffn_residual_ln", dx)
        dr2, grads[p + "ln2_g"], grads[p + "ln2_b"] = _ln_backward(dx, weights[p + "ln2_g"], lc["ln2"])
        df = back(s + "ffn", dr2)
        grads[p + "W_ff2"] = _sum_outer(lc["hdn"], df)
        dh = back(s + "ffn_hidden", df @ weights[p + "W_ff2"].T)
        du = dh * (lc["u"] > 0)
        grads[p + "W_ff1"] = _sum_outer(lc["a"], du)
        da = back(s + "residual_ln", dr2 + du @ weights[p + "W_ff1"].T)
        dr1, grads[p + "ln1_g"], grads[p + "ln1_b"] = _ln_backward(da, weights[p + "ln1_g"], lc["ln1"])

        do = back(s + "out_proj", dr1)
        grads[p + "W_o"] = _sum_outer(lc["attn"], do)
        dattn = back(s + "attn_div", do @ weights[p + "W_o"].T)
        den = lc["den"][..., None] + ATTN_EPS
        dnum = back(s + "attn_output", dattn / den)
        dden = back(s + "qk_normalizer", -(dattn * lc["num"]).sum(-1) / den[..., 0] ** 2)
        dscores = dnum @ lc["vp"].transpose(0, 2, 1) + dden[..., None]
        dv = lc["scores"].transpose(0, 2, 1) @ dnum
        dscores = back(s + "qk_mult", dscores)
        dq = back(s + "q_proj", (dscores @ lc["fk"]) * (lc["qp"] > 0))
        dk = back(s + "k_proj", (dscores.transpose(0, 2, 1) @ lc["fq"]) * (lc["kp"] > 0))
        dv = back(s + "v_proj", dv)
        x_in = lc["x"]
        grads[p + "W_q"] = _sum_outer(x_in, dq)
        grads[p + "W_k"] = _sum_outer(x_in, dk)
        grads[p + "W_v"] = _sum_outer(x_in, dv)
        dx = (dr1 + dq @ weights[p + "W_q"].T + dk @ weights[p + "W_k"].T
              + dv @ weights[p + "W_v"].T)

    dx = back("positional_encoding", dx)
    grads["pos"] = dx.sum(0)
    dh = back("input_layer", dx)
    grads["W_in"] = _sum_outer(cache["t"], dh)
    if "wavelet" in trace.masks:
        back("wavelet", dh @ weights["W_in"].T)
    return grads


def predict(params: dict, cfg: DecoderConfig, tokens, quant=None, batch_size: int = 256):
    """Logits and pooled embeddings for a (n, L, D) token stack."""
    tokens = np.asarray(tokens, dtype=np.float64)
    logits, zs = [], []
    for start in range(0, len(tokens), batch_size):
        tr = forward(params, cfg, tokens[start:start + batch_size], quant)
        logits.append(tr.logits)
        zs.append(tr.z)
    if not logits:
        return np.zeros((0, cfg.out_dim)), np.zeros((0, cfg.embed_dim))
    return np.concatenate(logits), np.concatenate(zs)
