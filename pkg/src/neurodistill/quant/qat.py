"""Quantization-aware training with learnable clip ranges.

Activation sites follow the decoder's graph. Sites listed as learnable get
an alpha that is trained jointly with the weights; the remaining sites use
a fixed range estimated from calibration data.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import model as M
from ..errors import ConfigError, ContractError
from ..optim import TrainHyper, cross_entropy, fit, mse, split_indices, validation_score
from .engine import ClipSet, FrontEnd, QuantizedModel, fold
from .primitives import QuantSpec, fake_quant_weight, pact_clip_forward

log = logging.getLogger(__name__)

ALPHA_PREFIX = "alpha/"
ALPHA_FLOOR = 1e-6

LEARNABLE_LAYER_SITES = ("q_proj", "k_proj", "v_proj", "qk_mult", "qk_normalizer", "attn_output", "out_proj")
RANGE_LAYER_SITES = ("residual_ln", "ffn_hidden", "ffn", "ffn_residual_ln")
ALIASES = {"attn_div": "v_proj"}  # attention output lies inside the value range

PRESET_CLIPS = {
    "wavelet": 1.0,
    "layer1.q_proj": 1.5, "layer1.k_proj": 2.0, "layer1.v_proj": 1.5, "layer1.qk_mult": 3.0,
    "layer1.qk_normalizer": 25.0, "layer1.attn_output": 10.0, "layer1.out_proj": 1.0,
    "layer2.q_proj": 7.0, "layer2.k_proj": 5.0, "layer2.v_proj": 5.0, "layer2.qk_mult": 20.0,
    "layer2.qk_normalizer": 150.0, "layer2.attn_output": 100.0, "layer2.out_proj": 1.5,
}


def site_names(cfg: M.DecoderConfig):
    """(learnable, range-estimated) site names for a decoder config."""
    learn = ["wavelet"]
    fixed = ["input_layer", "positional_encoding"]
    for i in range(cfg.n_layers):
        s = M.site_prefix(i)
        learn += [s + n for n in LEARNABLE_LAYER_SITES]
        fixed += [s + n for n in RANGE_LAYER_SITES]
    fixed.append("classifier")
    return learn, fixed


def _alias(site: str) -> str:
    head, _, leaf = site.rpartition(".")
    if leaf in ALIASES:
        return (head + "." if head else "") + ALIASES[leaf]
    return site


class QuantHooks:
    """Hook object consumed by :func:`neurodistill.model.forward`.

    mode ``"fake"`` fake-quantizes weights and activations; ``"clamp"`` only
    clamps activations (weights untouched), which is the differentiable
    surrogate used to check alpha gradients.
    """

    def __init__(self, clips: ClipSet, spec: QuantSpec = QuantSpec(), mode: str = "fake"):
        if mode not in ("fake", "clamp"):
            raise ConfigError(f"unknown hook mode {mode!r}")
        self.clips = clips
        self.spec = spec
        self.mode = mode

    def weight(self, name, w):
        if self.mode == "fake" and (name.rsplit(".", 1)[-1].startswith("W_") or name == "pos"):
            return fake_quant_weight(w, self.spec.weight_bits)
        return w

    def act(self, site, x):
        key = _alias(site)
        if key not in self.clips.alphas:
            return x, None
        return pact_clip_forward(x, float(self.clips.alphas[key]), self.spec.act_bits,
                                 quantize=self.mode == "fake")

    def learnable(self, site) -> bool:
        return site in self.clips.learnable and _alias(site) == site


class _Recorder:
    def __init__(self):
        self.values = {}

    def weight(self, name, w):
        return w

    def act(self, site, x):
        self.values.setdefault(site, []).append(np.abs(x).ravel())
        return x, None

    def learnable(self, site):
        return False


def calibrate_clips(params: dict, cfg: M.DecoderConfig, tokens, percentile: float = 99.9,
                    preset: Optional[dict] = None, batch_size: int = 256) -> ClipSet:
    """Initial clip ranges from full-precision activations.

    Learnable sites start at the given percentile of |activation|; range
    sites take the observed max |activation|. ``preset`` (for example
    :data:`PRESET_CLIPS`) overrides the learnable initial values by site name.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 3 or len(tokens) == 0:
        raise ConfigError("calibration needs at least one window of tokens")
    rec = _Recorder()
    for start in range(0, len(tokens), batch_size):
        M.forward(params, cfg, tokens[start:start + batch_size], rec)
    learn, fixed = site_names(cfg)
    alphas = {}
    for site in learn + fixed:
        v = np.concatenate(rec.values[site])
        a = float(np.percentile(v, percentile)) if site in learn else float(v.max())
        alphas[site] = a if a > 0 else 1.0
    if preset:
        for site, a in preset.items():
            if site not in alphas:
                raise ConfigError(f"preset site {site!r} does not exist in this decoder")
            alphas[site] = float(a)
    return ClipSet(alphas, set(learn))


def preset_clips(params: dict, cfg: M.DecoderConfig, tokens) -> ClipSet:
    """Named clip values for the two-layer config; range sites still calibrated."""
    if cfg.n_layers != 2:
        raise ConfigError("the named clip preset describes the two-layer decoder")
    return calibrate_clips(params, cfg, tokens, preset=PRESET_CLIPS)


def _with_alphas(params: dict, clips: ClipSet) -> dict:
    out = dict(params)
    for site in clips.learnable:
        out[ALPHA_PREFIX + site] = np.asarray(float(clips.alphas[site]))
    return out


def _split_alphas(params: dict, clips: ClipSet):
    weights = {k: v for k, v in params.items() if not k.startswith(ALPHA_PREFIX)}
    alphas = dict(clips.alphas)
    for k, v in params.items():
        if k.startswith(ALPHA_PREFIX):
            alphas[k[len(ALPHA_PREFIX):]] = max(float(v), ALPHA_FLOOR)
    return weights, ClipSet(alphas, set(clips.learnable))


@dataclass
class QATHyper:
    train: TrainHyper = field(default_factory=lambda: TrainHyper(epochs=5))
    loss: str = "task"  # task | logit_mse
    alpha_lr_scale: float = 1.0


def qat_train(params: dict, cfg: M.DecoderConfig, tokens, labels, clips: ClipSet, frontend: FrontEnd,
              hyper: QATHyper = QATHyper(), rng: Optional[np.random.Generator] = None,
              spec: QuantSpec = QuantSpec(), teacher_logits=None) -> QuantizedModel:
    """Fine-tune weights and clip ranges under fake quantization, then fold.

    ``hyper.loss == "logit_mse"`` distils from ``teacher_logits`` (one row per
    window) instead of the labels. Zero epochs yields plain post-training
    quantization of ``params``.
    """
    rng = rng if rng is not None else np.random.default_rng(42)
    tokens = np.asarray(tokens, dtype=np.float64)
    labels = np.asarray(labels)
    if hyper.loss not in ("task", "logit_mse"):
        raise ConfigError(f"unknown QAT loss {hyper.loss!r}")
    if hyper.loss == "logit_mse" and teacher_logits is None:
        raise ContractError("logit_mse QAT needs teacher logits")
    tr_idx, val_idx = split_indices(len(tokens), hyper.train.val_fraction, rng)
    if len(val_idx) == 0:
        val_idx = tr_idx

    def loss_and_grads(p, idx, need_grads):
        rows = tr_idx[idx]
        w, cs = _split_alphas(p, clips)
        trace = M.forward(w, cfg, tokens[rows], QuantHooks(cs, spec))
        if hyper.loss == "logit_mse":
            loss, g = mse(trace.logits, np.asarray(teacher_logits)[rows])
        elif cfg.task == "classification":
            loss, g = cross_entropy(trace.logits, labels[rows])
        else:
            loss, g = mse(trace.logits, labels[rows].astype(np.float64).reshape(trace.logits.shape))
        if not need_grads:
            return loss, None
        grads = M.backward(trace, w, cfg, g)
        return loss, {k: (np.asarray(v) * hyper.alpha_lr_scale if k.startswith(ALPHA_PREFIX) else v)
                      for k, v in grads.items()}

    def evaluate(p):
        w, cs = _split_alphas(p, clips)
        logits, _ = M.predict(w, cfg, tokens[val_idx], QuantHooks(cs, spec))
        return validation_score(logits, labels[val_idx], cfg.task)

    start = _with_alphas(params, clips)
    report = fit(start, loss_and_grads, evaluate, len(tr_idx), hyper.train,
                 hyper.train.resolved_lr(cfg.task), rng)
    weights, final_clips = _split_alphas(report.params, clips)
    qm = fold(weights, cfg, final_clips, frontend, spec)
    qm.report["qat"] = report.to_dict()
    qm.report["alpha_init"] = {k: float(v) for k, v in sorted(clips.alphas.items())}
    qm.params = weights
    return qm
