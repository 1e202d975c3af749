"""Dense linear algebra helpers and seeded randomness.

Everything here works on float64 numpy arrays. The helpers add the shape and
symmetry contracts the rest of the package relies on; the heavy lifting is
done by LAPACK through numpy.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError

PINV_REL_TOL = 1e-10


class EigenDecomposition(NamedTuple):
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # orthonormal columns, same order


def make_rng(seed: int = 42) -> np.random.Generator:
    """Seeded generator (PCG64); identical seed gives an identical stream."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractError("matrix contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _check_symmetric(a: np.ndarray) -> None:
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got {a.shape}")
    scale = np.abs(a).max() if a.size else 0.0
    if np.abs(a - a.T).max(initial=0.0) > 1e-9 * scale:
        raise ContractError("matrix is not symmetric")


def sym_eigen(a) -> EigenDecomposition:
    """Full eigendecomposition of a symmetric matrix, eigenvalues descending."""
    a = as_matrix(a)
    _check_symmetric(a)
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    order = np.argsort(w)[::-1]
    return EigenDecomposition(w[order], v[:, order])


def pinv_psd(a, rel_tol: float = PINV_REL_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse of a symmetric PSD matrix.

    Eigenvalues below ``rel_tol * lambda_max`` are treated as zero.
    """
    w, v = sym_eigen(a)
    if w.size == 0:
        return np.zeros_like(as_matrix(a))
    cutoff = rel_tol * max(w[0], 0.0)
    keep = w > cutoff
    if not np.any(keep):
        return np.zeros((v.shape[0], v.shape[0]))
    vk = v[:, keep]
    return (vk / w[keep]) @ vk.T


def qr_orthonormal(a) -> np.ndarray:
    """Orthonormal basis of span(a) for a tall, full-column-rank matrix."""
    a = as_matrix(a)
    rows, cols = a.shape
    if rows < cols:
        raise DimensionError(f"need rows >= cols, got {a.shape}")
    q, r = np.linalg.qr(a)
    diag = np.abs(np.diag(r))
    scale = max(np.abs(a).max(initial=0.0), 1e-300)
    if cols and diag.min() <= 1e-12 * scale * max(rows, 1):
        raise DegenerateInputError("matrix is rank deficient")
    # fix signs so the result is a deterministic function of the input
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs
