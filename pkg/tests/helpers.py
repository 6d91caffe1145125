"""Shared test utilities: finite-difference oracles and small conveniences."""

import numpy as np


def fd_gradient(fun, x0, step=1e-6):
    """Central finite differences of a scalar function of a flat vector."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    for k in range(x0.size):
        xp = x0.copy()
        xp[k] += step
        xm = x0.copy()
        xm[k] -= step
        g[k] = (fun(xp) - fun(xm)) / (2.0 * step)
    return g


def fd_matrix_gradient(fun, a0, step=1e-6):
    """Central finite differences of a scalar function of a matrix."""
    a0 = np.asarray(a0, dtype=np.float64)
    g = np.zeros_like(a0)
    for i in range(a0.shape[0]):
        for j in range(a0.shape[1]):
            ap = a0.copy()
            ap[i, j] += step
            am = a0.copy()
            am[i, j] -= step
            g[i, j] = (fun(ap) - fun(am)) / (2.0 * step)
    return g


def rel_err(approx, exact, floor=1e-10):
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    return float(np.max(np.abs(approx - exact)) / max(floor, float(np.max(np.abs(exact)))))


def random_spd(rng, n, cond_span=(0.2, 3.0)):
    """Random symmetric positive definite matrix with eigenvalues inside
    cond_span."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    lam = rng.uniform(*cond_span, size=n)
    return (q * lam) @ q.T
