"""Task-specific distillation: supervised projector fitting and student training.

The projector ``P`` (d_t x d_s) is fitted once on teacher embeddings by
minimizing the self-compression loss ``mean ||W_T^T z - (P U)^T z||^2`` and
then frozen; the student is trained against the teacher logits plus the
projected teacher features ``P^T z_T``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model as M
from .errors import ConfigError, ContractError, DimensionError
from .metrics import covariance, optimal_u
from .numeric import qr_orthonormal, sym_eigen
from .optim import (AdamState, TrainHyper, TrainReport, adam_step, cross_entropy, fit, mse,
                    split_indices, validation_score)

FULL_BATCH_MAX_ROWS = 4096
LOGIT_CHECK_TOL = 1e-5


@dataclass
class TeacherExport:
    z_t: np.ndarray  # (n, d_t)
    w_t: np.ndarray  # (d_t, K)
    b_t: np.ndarray  # (K,)
    logits: np.ndarray  # (n, K)
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.z_t = np.atleast_2d(np.asarray(self.z_t, dtype=np.float64))
        self.w_t = np.atleast_2d(np.asarray(self.w_t, dtype=np.float64))
        self.b_t = np.asarray(self.b_t, dtype=np.float64).ravel()
        self.logits = np.atleast_2d(np.asarray(self.logits, dtype=np.float64))
        n, d_t = self.z_t.shape
        if n < 1:
            raise DimensionError("teacher export needs at least one row")
        if self.w_t.shape[0] != d_t or self.w_t.shape[1] != self.b_t.size:
            raise DimensionError(f"classifier {self.w_t.shape}/{self.b_t.shape} does not fit d_t={d_t}")
        if self.logits.shape != (n, self.b_t.size):
            raise DimensionError(f"logits shape {self.logits.shape} != ({n}, {self.b_t.size})")

    @property
    def n(self) -> int:
        return self.z_t.shape[0]

    @property
    def d_t(self) -> int:
        return self.z_t.shape[1]

    @property
    def n_out(self) -> int:
        return self.b_t.size

    def logit_residual(self) -> float:
        """Largest |logits - (Z W + b)|, scaled for logits above unit magnitude."""
        recomputed = self.z_t @ self.w_t + self.b_t
        return float(np.max(np.abs(recomputed - self.logits) / np.maximum(1.0, np.abs(self.logits))))

    def consistent(self, tol: float = LOGIT_CHECK_TOL) -> bool:
        return self.logit_residual() <= tol


@dataclass
class Projector:
    p: np.ndarray  # (d_t, d_s)
    kind: str
    fit_meta: dict = field(default_factory=dict)

    @property
    def d_s(self) -> int:
        return self.p.shape[1]

    def project(self, z_t) -> np.ndarray:
        return np.asarray(z_t, dtype=np.float64) @ self.p


@dataclass
class DistillHyper:
    lam: float = 1.0
    ce_mix: Optional[float] = None
    projector_lr: float = 1e-2
    projector_iters: int = 2000
    train: TrainHyper = field(default_factory=TrainHyper)

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.ce_mix is not None and not 0.0 <= self.ce_mix <= 1.0:
            raise ConfigError("ce_mix must lie in [0, 1]")


def fit_supervised_projector(teacher: TeacherExport, d_s: int, hyper: Optional[DistillHyper] = None,
                             rng: Optional[np.random.Generator] = None, normalize: bool = True) -> Projector:
    """Fit P (and a throwaway classifier U) by Adam on the self-compression loss.

    Embeddings are centered, so the loss equals ``tr((W - PU)^T Sigma (W - PU))``
    and full-batch steps only need Sigma. After the Adam phase U is replaced by
    its closed-form optimum for the final P. With ``normalize`` P is rescaled so
    projected teacher features have unit RMS; span(P) and the loss are unchanged.
    """
    hyper = hyper or DistillHyper()
    rng = rng if rng is not None else np.random.default_rng(0)
    d_t = teacher.d_t
    if d_s > d_t:
        raise ConfigError(f"d_s={d_s} exceeds teacher width d_t={d_t}")
    if d_s < 1:
        raise ConfigError("d_s must be >= 1")
    w = teacher.w_t
    zc = teacher.z_t - teacher.z_t.mean(axis=0)
    sigma = covariance(teacher.z_t).sigma if teacher.n >= 2 else zc.T @ zc
    full_batch = teacher.n <= FULL_BATCH_MAX_ROWS

    params = {"P": rng.standard_normal((d_t, d_s)) / np.sqrt(d_t),
              "U": 0.01 * rng.standard_normal((d_s, w.shape[1]))}
    state = AdamState(lr=hyper.projector_lr)
    for _ in range(hyper.projector_iters):
        if full_batch:
            s = sigma
        else:
            rows = zc[rng.choice(teacher.n, FULL_BATCH_MAX_ROWS, replace=False)]
            s = rows.T @ rows / len(rows)
        resid = w - params["P"] @ params["U"]
        g = -2.0 * s @ resid
        grads = {"P": g @ params["U"].T, "U": params["P"].T @ g}
        params, state = adam_step(state, params, grads)

    p = params["P"]
    if normalize:
        rms = np.sqrt(np.mean((teacher.z_t @ p) ** 2))
        if rms > 0:
            p = p / rms
    u_star, loss = optimal_u(p, w, sigma)
    return Projector(p, "supervised", {"iterations": hyper.projector_iters,
                                       "final_compress_loss": loss, "u_star": u_star})


def pca_projector(z_t, d_s: int) -> Projector:
    """Top-d_s principal directions of the centered teacher embeddings."""
    cov = covariance(z_t)
    w, v = sym_eigen(cov.sigma)
    return Projector(v[:, :d_s].copy(), "pca", {"eigenvalues": w[:d_s]})


def random_orthogonal_projector(d_t: int, d_s: int, rng: np.random.Generator) -> Projector:
    return Projector(qr_orthonormal(rng.standard_normal((d_t, d_s))), "random_orthogonal")


def tskd_losses(student_logits, z_s, teacher_logits, projected_teacher, lam: float = 1.0,
                ce_mix: Optional[float] = None, labels=None, task: str = "classification"):
    """Logit matching plus lambda-weighted feature matching, averaged over the batch.

    Returns ``(loss, dLoss/dlogits, dLoss/dz_s)``. With ``ce_mix`` the result is
    ``(1 - ce_mix) * distill + ce_mix * task_loss``.
    """
    s = np.asarray(student_logits, dtype=np.float64)
    z = np.asarray(z_s, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64).reshape(s.shape)
    pt = np.asarray(projected_teacher, dtype=np.float64).reshape(z.shape)
    b = s.shape[0] if s.ndim == 2 else 1
    dl = s - t
    dfeat = z - pt
    loss = float(((dl * dl).sum() + lam * (dfeat * dfeat).sum()) / b)
    g_logits = 2.0 * dl / b
    g_z = 2.0 * lam * dfeat / b
    if ce_mix is not None:
        if labels is None:
            raise ContractError("ce_mix needs labels")
        if task == "classification":
            task_loss, task_grad = cross_entropy(s, labels)
        else:
            task_loss, task_grad = mse(s, labels)
        loss = (1.0 - ce_mix) * loss + ce_mix * task_loss
        g_logits = (1.0 - ce_mix) * g_logits + ce_mix * task_grad
        g_z = (1.0 - ce_mix) * g_z
    return loss, g_logits, g_z


def distill_decomposition(w_t, w_s, p, z_t, z_s):
    """Terms of the logit-distillation expansion for one sample.

    Returns ``(total, compress, feature, cross)`` where
    ``total = ||W_T^T z_T - W_S^T z_S||^2`` and ``total = compress + feature + cross``.
    """
    w_t, w_s, p = (np.asarray(a, dtype=np.float64) for a in (w_t, w_s, p))
    z_t, z_s = np.asarray(z_t, dtype=np.float64), np.asarray(z_s, dtype=np.float64)
    total = np.sum((w_t.T @ z_t - w_s.T @ z_s) ** 2)
    a = w_t.T @ z_t - (p @ w_s).T @ z_t
    bvec = w_s.T @ (p.T @ z_t - z_s)
    return float(total), float(a @ a), float(bvec @ bvec), float(2.0 * a @ bvec)


def _labels_for(teacher: TeacherExport, labels):
    if labels is not None:
        return np.asarray(labels)
    return teacher.labels


def _aligned(tokens, teacher):
    tokens = np.asarray(tokens, dtype=np.float64)
    if len(tokens) != teacher.n:
        raise ContractError(f"{len(tokens)} windows but {teacher.n} teacher rows")
    return tokens


def distill_train(cfg: M.DecoderConfig, params: dict, tokens, teacher: TeacherExport,
                  projector: Projector, hyper: DistillHyper, rng: np.random.Generator,
                  labels=None) -> TrainReport:
    """Train the student with the frozen projector; best epoch chosen on validation."""
    tokens = _aligned(tokens, teacher)
    if projector.d_s != cfg.embed_dim or projector.p.shape[0] != teacher.d_t:
        raise DimensionError(f"projector {projector.p.shape} incompatible with d_t={teacher.d_t}, "
                             f"d_s={cfg.embed_dim}")
    labels = _labels_for(teacher, labels)
    targets = projector.project(teacher.z_t)
    tr_idx, val_idx = split_indices(len(tokens), hyper.train.val_fraction, rng)
    if len(val_idx) == 0:
        val_idx = tr_idx

    def loss_and_grads(p, idx, need_grads):
        rows = tr_idx[idx]
        trace = M.forward(p, cfg, tokens[rows])
        loss, g_logits, g_z = tskd_losses(trace.logits, trace.z, teacher.logits[rows], targets[rows],
                                          hyper.lam, hyper.ce_mix,
                                          None if labels is None else labels[rows], cfg.task)
        return loss, (M.backward(trace, p, cfg, g_logits, g_z) if need_grads else None)

    def evaluate(p):
        logits, z = M.predict(p, cfg, tokens[val_idx])
        if labels is not None:
            return validation_score(logits, labels[val_idx], cfg.task)
        return -tskd_losses(logits, z, teacher.logits[val_idx], targets[val_idx], hyper.lam)[0]

    report = fit(params, loss_and_grads, evaluate, len(tr_idx), hyper.train,
                 hyper.train.resolved_lr(cfg.task), rng)
    report.extras.update(train_idx=tr_idx, val_idx=val_idx)
    return report


def feature_residual(cfg, params, tokens, teacher: TeacherExport, projector: Projector) -> float:
    """Mean ||P^T z_T - z_S|| over the aligned rows."""
    _, z = M.predict(params, cfg, _aligned(tokens, teacher))
    return float(np.mean(np.linalg.norm(projector.project(teacher.z_t) - z, axis=1)))


def inverse_projection_losses(z_s, p_inv, w_h, b_h, z_t, teacher_logits, lam: float = 1.0):
    """Loss and gradients for the inverse-projection baseline.

    The student embedding is lifted to teacher width, ``z_p = P_inv^T z_s``,
    aligned with ``z_t`` and classified by the head ``(w_h, b_h)``. Returns
    ``(loss, logits, grads)`` with grads for ``z_s``, ``p_inv``, ``w_h``, ``b_h``.
    """
    z_s = np.atleast_2d(np.asarray(z_s, dtype=np.float64))
    z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    b = z_s.shape[0]
    z_p = z_s @ p_inv
    logits = z_p @ w_h + b_h
    dl = logits - np.atleast_2d(teacher_logits)
    df = z_p - z_t
    loss = float(((dl * dl).sum() + lam * (df * df).sum()) / b)
    g_logits = 2.0 * dl / b
    g_zp = g_logits @ w_h.T + 2.0 * lam * df / b
    grads = {"z_s": g_zp @ p_inv.T, "p_inv": z_s.T @ g_zp, "w_h": z_p.T @ g_logits,
             "b_h": g_logits.sum(0)}
    return loss, logits, grads


def inverse_projection_baseline(cfg: M.DecoderConfig, params: dict, tokens, teacher: TeacherExport,
                                hyper: DistillHyper, rng: np.random.Generator,
                                labels=None, p_inv=None) -> TrainReport:
    """Train student and inverse projector jointly; classify from the lifted embedding.

    The lifted-embedding head starts from the teacher classifier. The extra
    parameters are stored in the report's params under ``inv.*`` keys.
    """
    tokens = _aligned(tokens, teacher)
    labels = _labels_for(teacher, labels)
    if p_inv is None:
        p_inv = rng.standard_normal((cfg.embed_dim, teacher.d_t)) / np.sqrt(cfg.embed_dim)
    params = dict(params)
    params.update({"inv.P": np.array(p_inv, dtype=np.float64), "inv.W_h": teacher.w_t.copy(),
                   "inv.b_h": teacher.b_t.copy()})
    model_keys = [k for k in params if not k.startswith("inv.")]
    tr_idx, val_idx = split_indices(len(tokens), hyper.train.val_fraction, rng)
    if len(val_idx) == 0:
        val_idx = tr_idx

    def split(p):
        return {k: p[k] for k in model_keys}

    def loss_and_grads(p, idx, need_grads):
        rows = tr_idx[idx]
        mp = split(p)
        trace = M.forward(mp, cfg, tokens[rows])
        loss, _, g = inverse_projection_losses(trace.z, p["inv.P"], p["inv.W_h"], p["inv.b_h"],
                                               teacher.z_t[rows], teacher.logits[rows], hyper.lam)
        if not need_grads:
            return loss, None
        grads = M.backward(trace, mp, cfg, np.zeros_like(trace.logits), g["z_s"])
        grads.update({"inv.P": g["p_inv"], "inv.W_h": g["w_h"], "inv.b_h": g["b_h"]})
        return loss, grads

    def evaluate(p):
        _, z = M.predict(split(p), cfg, tokens[val_idx])
        logits = z @ p["inv.P"] @ p["inv.W_h"] + p["inv.b_h"]
        if labels is not None:
            return validation_score(logits, labels[val_idx], cfg.task)
        return -float(np.mean((logits - teacher.logits[val_idx]) ** 2))

    report = fit(params, loss_and_grads, evaluate, len(tr_idx), hyper.train,
                 hyper.train.resolved_lr(cfg.task), rng)
    report.extras.update(train_idx=tr_idx, val_idx=val_idx)
    return report


def inverse_predict(params: dict, cfg: M.DecoderConfig, tokens) -> np.ndarray:
    model_params = {k: v for k, v in params.items() if not k.startswith("inv.")}
    _, z = M.predict(model_params, cfg, tokens)
    return z @ params["inv.P"] @ params["inv.W_h"] + params["inv.b_h"]
