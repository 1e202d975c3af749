"""Shared oracles for the test suite."""
import numpy as np


def fd_grad(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at array x (x is restored)."""
    x = np.asarray(x)
    g = np.zeros(x.shape)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        g.reshape(-1)[i] = (fp - fm) / (2 * h)
    return g


def rel_err(analytic, numeric, floor=1e-4):
    """Max abs error relative to the tensor's largest numeric entry.

    The floor keeps near-zero tensors from amplifying the ~1e-11 round-off of
    central differences on O(1) losses.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(a - n), initial=0.0) / max(np.max(np.abs(n), initial=0.0), floor))


def random_spd(rng, d, cond=50.0):
    q = np.linalg.qr(rng.standard_normal((d, d)))[0]
    w = np.exp(rng.uniform(0, np.log(cond), d))
    return (q * w) @ q.T


def low_variance_teacher(seed, n=2000, d_t=32):
    """Teacher whose classifier energy sits half in the top variance direction and
    half in the two smallest-variance directions."""
    from neurodistill.distill import TeacherExport
    rng = np.random.default_rng(seed)
    lam = np.concatenate([np.full(4, 10.0), np.linspace(3.0, 0.5, d_t - 6), np.full(2, 0.05)])
    q = np.linalg.qr(rng.standard_normal((d_t, d_t)))[0]
    z = (rng.standard_normal((n, d_t)) * np.sqrt(lam)) @ q.T
    w = np.zeros((d_t, 3))
    w[0, 0] = 1 / np.sqrt(10.0)
    w[d_t - 2, 1] = 1 / np.sqrt(0.05)
    w[d_t - 1, 2] = 1 / np.sqrt(0.05)
    w = q @ w
    b = np.zeros(3)
    logits = z @ w + b
    return TeacherExport(z, w, b, logits, logits.argmax(1)), rng
