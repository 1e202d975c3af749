"""Projection-quality metrics (TSR and its closed forms) plus task metrics.

Notation: ``W`` is the teacher classifier (d_t x K), ``P`` a projector
(d_t x d_s), ``Sigma`` the centered covariance of teacher embeddings, and
``||A||_Sigma^2 = tr(A^T Sigma A)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DimensionError, UndefinedMetricError
from .numeric import as_matrix, pinv_psd, qr_orthonormal

CCA_RHO_CLIP = 1.0 - 1e-6  # above the ridge-limited correlation of identical inputs
CCA_RIDGE = 1e-8


@dataclass
class CovarianceModel:
    sigma: np.ndarray
    mean: np.ndarray
    n: int


@dataclass
class ProjectionReport:
    tsr: float
    eps_compress_min: float
    u_star: np.ndarray
    mi_cca: float
    recon_error: float
    cumulative_curve: np.ndarray

    def to_dict(self) -> dict:
        return {"tsr": self.tsr, "eps_compress_min": self.eps_compress_min,
                "mi_cca": self.mi_cca, "recon_error": self.recon_error,
                "cumulative_curve": [float(c) for c in self.cumulative_curve]}


def covariance(z) -> CovarianceModel:
    """Mean-centered covariance with 1/n normalization."""
    z = as_matrix(z)
    n = z.shape[0]
    if n < 2:
        raise DegenerateInputError("covariance needs at least 2 samples")
    mean = z.mean(axis=0)
    zc = z - mean
    s = zc.T @ zc / n
    return CovarianceModel(0.5 * (s + s.T), mean, n)


def sigma_norm_sq(a, sigma) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.trace(a.T @ sigma @ a))


def sigma_projector(p, sigma) -> np.ndarray:
    """Sigma-orthogonal projector P (P^T Sigma P)^+ P^T Sigma onto span(P)."""
    p, sigma = as_matrix(p), as_matrix(sigma)
    if sigma.shape != (p.shape[0], p.shape[0]):
        raise DimensionError(f"Sigma {sigma.shape} does not match P {p.shape}")
    return p @ pinv_psd(p.T @ sigma @ p) @ p.T @ sigma


def compress_error(p, u, w, sigma) -> float:
    """Self-compression error tr((W - PU)^T Sigma (W - PU))."""
    return sigma_norm_sq(np.asarray(w) - np.asarray(p) @ np.asarray(u), sigma)


def optimal_u(p, w, sigma):
    """Closed-form minimizer U* and the minimum compression error."""
    p, w, sigma = as_matrix(p), as_matrix(w), as_matrix(sigma)
    if w.shape[0] != p.shape[0]:
        raise DimensionError(f"W {w.shape} does not match P {p.shape}")
    u_star = pinv_psd(p.T @ sigma @ p) @ p.T @ sigma @ w
    residual = w - p @ u_star
    return u_star, sigma_norm_sq(residual, sigma)


def tsr(p, w, sigma) -> float:
    """Fraction of the teacher classifier's Sigma-energy kept by span(P)."""
    w, sigma = as_matrix(w), as_matrix(sigma)
    total = sigma_norm_sq(w, sigma)
    if total <= 0.0:
        raise UndefinedMetricError("||W||_Sigma^2 is zero; TSR undefined")
    kept = sigma_norm_sq(sigma_projector(p, sigma) @ w, sigma)
    return float(min(max(kept / total, 0.0), 1.0))


def cumulative_curve(p, w, sigma) -> np.ndarray:
    """Running sum over task columns of ||Pi w_k||_Sigma^2."""
    pw = sigma_projector(p, sigma) @ as_matrix(w)
    per_col = np.einsum("ik,ij,jk->k", pw, sigma, pw)
    return np.cumsum(per_col)


def _ridge_cov(x):
    c = x.T @ x / x.shape[0]
    d = c.shape[0]
    return c + CCA_RIDGE * max(np.trace(c), 1e-300) / d * np.eye(d)


def _inv_sqrt(c):
    w, v = np.linalg.eigh(c)
    return (v / np.sqrt(np.maximum(w, 1e-300))) @ v.T


def canonical_correlations(z, zp) -> np.ndarray:
    """Canonical correlations via SVD of the whitened cross-covariance."""
    z, zp = as_matrix(z), as_matrix(zp)
    if z.shape[0] != zp.shape[0]:
        raise DimensionError("Z and Zp have different sample counts")
    zc = z - z.mean(axis=0)
    pc = zp - zp.mean(axis=0)
    cxy = zc.T @ pc / zc.shape[0]
    m = _inv_sqrt(_ridge_cov(zc)) @ cxy @ _inv_sqrt(_ridge_cov(pc))
    k = min(z.shape[1], zp.shape[1])
    return np.linalg.svd(m, compute_uv=False)[:k]


def cca_mutual_information(z, zp) -> float:
    """Gaussian mutual information -1/2 sum log(1 - rho_i^2) over canonical pairs.

    Correlations are clipped below 1, so identical inputs saturate at a fixed
    ceiling rather than diverging.
    """
    rho = np.clip(canonical_correlations(z, zp), 0.0, CCA_RHO_CLIP)
    return float(-0.5 * np.log1p(-rho * rho).sum())


def relative_reconstruction_error(z, p) -> float:
    """||Z - Z Q Q^T||_F^2 / ||Z||_F^2 with Q an orthonormal basis of span(P)."""
    z = as_matrix(z)
    denom = float((z * z).sum())
    if denom == 0.0:
        raise UndefinedMetricError("Z is all zeros")
    q = qr_orthonormal(p)
    r = z - (z @ q) @ q.T
    return float((r * r).sum() / denom)


def projection_report(p, w, z) -> ProjectionReport:
    cov = covariance(z)
    u_star, eps_min = optimal_u(p, w, cov.sigma)
    zp = np.asarray(z) @ np.asarray(p)
    return ProjectionReport(
        tsr=tsr(p, w, cov.sigma),
        eps_compress_min=eps_min,
        u_star=u_star,
        mi_cca=cca_mutual_information(z, zp),
        recon_error=relative_reconstruction_error(z, p),
        cumulative_curve=cumulative_curve(p, w, cov.sigma),
    )


def task_metrics(preds, labels, task: str = "classification") -> dict:
    """Support-weighted F1, macro F1 and macro recall for classes; R^2 for regression."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape[0] == 0 or preds.shape[0] != labels.shape[0]:
        raise DimensionError("predictions and labels must be nonempty and aligned")
    if task == "regression":
        y = labels.astype(np.float64).ravel()
        yhat = preds.astype(np.float64).ravel()
        ss_tot = float(((y - y.mean()) ** 2).sum())
        ss_res = float(((y - yhat) ** 2).sum())
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
        return {"r2": r2}
    y = labels.astype(np.int64)
    yhat = preds.astype(np.int64)
    classes = np.union1d(y, yhat)
    recalls, f1s, supports = [], [], []
    for c in classes:
        tp = int(np.sum((y == c) & (yhat == c)))
        support = int(np.sum(y == c))
        predicted = int(np.sum(yhat == c))
        if support:
            recalls.append(tp / support)
        prec = tp / predicted if predicted else 0.0
        rec = tp / support if support else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        supports.append(support)
    missing = len(classes) - len(recalls)
    if missing:
        warnings.warn(f"{missing} predicted class(es) have no support; excluded from macro recall")
    weighted_f1 = float(np.dot(f1s, supports) / np.sum(supports))
    return {"weighted_f1": weighted_f1, "macro_f1": float(np.mean(f1s)), "macro_recall": float(np.mean(recalls)),
            "accuracy": float(np.mean(y == yhat))}
