"""Losses, Adam with decoupled weight decay, and the mini-batch training loop."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import model as M
from .errors import ConfigError, ContractError, DimensionError, TrainingError
from .metrics import task_metrics

log = logging.getLogger(__name__)


def cross_entropy(logits, labels):
    """Softmax cross-entropy averaged over the batch.

    Returns ``(loss, grad)`` where grad is dLoss/dlogits (softmax - onehot, /B).
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z2 = z[None] if single else z
    y = np.atleast_1d(np.asarray(labels)).astype(np.int64)
    b, k = z2.shape
    if k < 2:
        raise ContractError("cross-entropy needs at least 2 classes")
    if y.shape != (b,):
        raise DimensionError(f"{y.shape[0]} labels for {b} rows")
    if np.any(y < 0) or np.any(y >= k):
        raise ContractError(f"label out of range for K={k}")
    shifted = z2 - z2.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float((lse - shifted[np.arange(b), y]).mean())
    grad = np.exp(shifted - lse[:, None])
    grad[np.arange(b), y] -= 1.0
    grad /= b
    return loss, grad[0] if single else grad


def mse(pred, target):
    """Mean squared error over the last axis, averaged over the batch."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64).reshape(p.shape)
    diff = p - t
    k = p.shape[-1] if p.ndim else 1
    b = diff.size // k
    loss = float((diff * diff).sum() / (k * b))
    return loss, 2.0 * diff / (k * b)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, decay: Optional[Callable] = None):
    """One bias-corrected Adam update with decoupled weight decay.

    Returns new ``(params, state)``; the inputs are left untouched. Decay is a
    multiplicative shrink by ``lr * weight_decay`` applied to names selected by
    ``decay`` (default: weight matrices only).
    """
    decay = decay or M.is_decayed
    step = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    bc1 = 1.0 - state.beta1**step
    bc2 = 1.0 - state.beta2**step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        base = p * (1.0 - state.lr * state.weight_decay) if state.weight_decay and decay(name) else p
        new_params[name] = base - update
        m_new[name], v_new[name] = m, v
    new_state = AdamState(state.lr, state.beta1, state.beta2, state.eps, state.weight_decay,
                          step, {**state.m, **m_new}, {**state.v, **v_new})
    return new_params, new_state


@dataclass
class TrainHyper:
    lr: Optional[float] = None  # default depends on the task
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 64
    val_fraction: float = 0.2

    def resolved_lr(self, task: str) -> float:
        if self.lr is not None:
            return self.lr
        return 3e-4 if task == "classification" else 3e-3


@dataclass
class TrainReport:
    train_loss: list
    val_metric: list
    best_epoch: int
    params: dict
    init_loss: float = float("nan")
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"train_loss": list(map(float, self.train_loss)),
                "val_metric": list(map(float, self.val_metric)),
                "best_epoch": int(self.best_epoch),
                "init_loss": float(self.init_loss)}


def split_indices(n: int, val_fraction: float, rng: np.random.Generator):
    """Deterministic shuffled train/validation split."""
    order = rng.permutation(n)
    n_val = int(round(n * val_fraction)) if n > 1 else 0
    if n_val >= n:
        n_val = n - 1
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def validation_score(logits, labels, task: str) -> float:
    if task == "classification":
        return task_metrics(np.argmax(logits, axis=1), labels, task)["macro_recall"]
    return task_metrics(logits[:, 0] if logits.ndim == 2 else logits, labels, task)["r2"]


def fit(params: dict, loss_and_grads: Callable, evaluate: Callable, n_train: int,
        hyper: TrainHyper, lr: float, rng: np.random.Generator,
        decay: Optional[Callable] = None) -> TrainReport:
    """Generic loop: shuffled mini-batches, Adam, keep the best-validation params.

    ``loss_and_grads(params, idx)`` returns ``(loss, grads)`` for the training
    rows ``idx``; ``evaluate(params)`` returns the validation metric (higher is
    better). Ties keep the earliest epoch.
    """
    if n_train < 1:
        raise ConfigError("no training data")
    state = AdamState(lr=lr, weight_decay=hyper.weight_decay)
    all_idx = np.arange(n_train)
    init_loss = float(np.mean([loss_and_grads(params, all_idx[s:s + hyper.batch_size], False)[0]
                               for s in range(0, n_train, hyper.batch_size)]))
    best = (-np.inf, -1, params)
    train_loss, val_metric = [], []
    last_good = params
    for epoch in range(hyper.epochs):
        order = rng.permutation(n_train)
        losses = []
        for start in range(0, n_train, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            loss, grads = loss_and_grads(params, idx, True)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}", last_good=last_good)
            params, state = adam_step(state, params, grads, decay)
            losses.append(loss * len(idx))
        train_loss.append(float(np.sum(losses) / n_train))
        metric = float(evaluate(params))
        val_metric.append(metric)
        last_good = params
        log.debug("epoch %d loss %.5f val %.4f", epoch, train_loss[-1], metric)
        if metric > best[0]:
            best = (metric, epoch, params)
    if hyper.epochs == 0:
        return TrainReport([], [], -1, params, init_loss)
    return TrainReport(train_loss, val_metric, best[1], copy.deepcopy(best[2]), init_loss)


def train(tokens, labels, cfg: M.DecoderConfig, hyper: TrainHyper, rng: np.random.Generator,
          params: Optional[dict] = None) -> TrainReport:
    """Train the decoder from scratch (or from ``params``) on labelled tokens."""
    tokens = np.asarray(tokens, dtype=np.float64)
    labels = np.asarray(labels)
    if len(tokens) == 0:
        raise ConfigError("empty training data")
    if len(labels) != len(tokens):
        raise ContractError("tokens and labels differ in length")
    if params is None:
        params = M.init_params(cfg, rng)
    tr_idx, val_idx = split_indices(len(tokens), hyper.val_fraction, rng)
    if len(val_idx) == 0:
        val_idx = tr_idx
    x_tr, y_tr = tokens[tr_idx], labels[tr_idx]
    x_val, y_val = tokens[val_idx], labels[val_idx]

    def loss_and_grads(p, idx, need_grads):
        trace = M.forward(p, cfg, x_tr[idx])
        if cfg.task == "classification":
            loss, g = cross_entropy(trace.logits, y_tr[idx])
        else:
            loss, g = mse(trace.logits, np.asarray(y_tr[idx], dtype=np.float64).reshape(trace.logits.shape))
        return loss, (M.backward(trace, p, cfg, g) if need_grads else None)

    def evaluate(p):
        logits, _ = M.predict(p, cfg, x_val)
        return validation_score(logits, y_val, cfg.task)

    report = fit(params, loss_and_grads, evaluate, len(tr_idx), hyper, hyper.resolved_lr(cfg.task), rng)
    report.extras["train_idx"] = tr_idx
    report.extras["val_idx"] = val_idx
    return report
