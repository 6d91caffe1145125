"""Dense linear-algebra kernels used across the package.

Everything operates on plain float64 ndarrays.  Rank decisions are always
relative: a mode is kept when its eigenvalue exceeds ``rtol * lambda_max``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

DEFAULT_RTOL = 1e-6

# relative scale below which two matrices count as equal / symmetric
_SYM_RTOL = 1e-8


class NotSymmetricError(ValueError):
    """Input expected to be symmetric is not."""


class NotPSDError(ValueError):
    """Input expected to be positive semi-definite has a significantly negative eigenvalue."""


def check_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and coerce ``a`` to a finite 2-d float64 array."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must have positive dimensions, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _check_square_symmetric(a: np.ndarray, name: str) -> np.ndarray:
    a = check_matrix(a, name)
    if a.shape[0] != a.shape[1]:
        raise NotSymmetricError(f"{name} must be square, got {a.shape}")
    scale = np.linalg.norm(a)
    if np.linalg.norm(a - a.T) > _SYM_RTOL * max(scale, 1.0):
        raise NotSymmetricError(f"{name} is not symmetric within tolerance")
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class SymEig:
    """Symmetric eigendecomposition with eigenvalues in descending order."""

    eigenvalues: np.ndarray  # (n,), descending
    eigenvectors: np.ndarray  # (n, n), orthonormal columns

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


@dataclass(frozen=True)
class GeneralEig:
    """General eigendecomposition with biorthonormal left/right eigenvectors.

    Eigenvalues are sorted by descending modulus, ties broken by descending
    real part then descending imaginary part.  After normalisation
    ``left[:, i].conj() @ right[:, k] == delta_ik``; ``ill_conditioned`` is
    set when a left/right pair is nearly orthogonal (near-defective matrix).
    """

    eigenvalues: np.ndarray  # (n,) complex
    right: np.ndarray  # (n, n) complex columns
    left: np.ndarray  # (n, n) complex columns
    ill_conditioned: bool = False


def eig_sort_order(w: np.ndarray) -> np.ndarray:
    """Deterministic ordering: |λ| desc, then Re λ desc, then Im λ desc."""
    w = np.asarray(w)
    return np.lexsort((-w.imag, -w.real, -np.abs(w)))


def sym_eig(a) -> SymEig:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""
    a = _check_square_symmetric(a, "sym_eig input")
    lam, v = np.linalg.eigh(a)
    return SymEig(eigenvalues=lam[::-1].copy(), eigenvectors=v[:, ::-1].copy())


def general_eig(a) -> GeneralEig:
    """Two-sided eigendecomposition of a square real matrix.

    Right eigenvectors satisfy A v = λ v, left ones u* A = λ u*.  Right
    vectors are rescaled so that u_i* v_i = 1.
    """
    a = check_matrix(a, "general_eig input")
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"general_eig input must be square, got {a.shape}")
    w, vl, vr = scipy.linalg.eig(a, left=True, right=True)
    order = eig_sort_order(w)
    w = w[order]
    vr = vr[:, order].astype(np.complex128)
    vl = vl[:, order].astype(np.complex128)
    # unit-norm columns before biorthonormal scaling
    vr /= np.linalg.norm(vr, axis=0, keepdims=True)
    vl /= np.linalg.norm(vl, axis=0, keepdims=True)
    overlap = np.sum(vl.conj() * vr, axis=0)
    ill = bool(np.any(np.abs(overlap) < 1e-6))
    safe = np.where(np.abs(overlap) < 1e-300, 1.0, overlap)
    vr = vr / safe
    return GeneralEig(eigenvalues=w, right=vr, left=vl, ill_conditioned=ill)


def svd(a) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD.  Returns (U, sigma descending, V) with V holding right
    singular vectors as columns, so ``a == U @ diag(sigma) @ V.T``."""
    a = check_matrix(a, "svd input")
    u, s, vh = np.linalg.svd(a, full_matrices=False)
    return u, s, vh.T


def psd_eigenvalues(a, rtol: float = DEFAULT_RTOL, name: str = "matrix") -> SymEig:
    """sym_eig plus a PSD check: eigenvalues below ``-rtol*lambda_max`` raise."""
    e = sym_eig(_check_square_symmetric(a, name))
    lam_max = max(float(e.eigenvalues[0]), 0.0)
    if float(e.eigenvalues[-1]) < -rtol * max(lam_max, 1e-300):
        raise NotPSDError(
            f"{name} is not PSD: min eigenvalue {e.eigenvalues[-1]:.3e} "
            f"vs max {lam_max:.3e}"
        )
    return e


def _psd_apply(e: SymEig, f) -> np.ndarray:
    v = e.eigenvectors
    return (v * f(e.eigenvalues)) @ v.T


def pinv_sqrt(a, rtol: float = DEFAULT_RTOL) -> np.ndarray:
    """Pseudo-inverse square root of a symmetric PSD matrix.

    Modes with eigenvalue > rtol*lambda_max contribute lambda^{-1/2}; the
    rest are truncated to zero.  Significantly negative eigenvalues raise
    NotPSDError.
    """
    e = psd_eigenvalues(a, rtol, "pinv_sqrt input")
    cut = rtol * max(float(e.eigenvalues[0]), 0.0)

    def f(lam):
        keep = lam > cut
        return np.where(keep, 1.0 / np.sqrt(np.where(keep, lam, 1.0)), 0.0)

    return _psd_apply(e, f)


def pinv_psd(a, rtol: float = DEFAULT_RTOL) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of a symmetric PSD matrix with the same
    relative truncation rule as :func:`pinv_sqrt`."""
    e = psd_eigenvalues(a, rtol, "pinv_psd input")
    cut = rtol * max(float(e.eigenvalues[0]), 0.0)

    def f(lam):
        keep = lam > cut
        return np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)

    return _psd_apply(e, f)


def hs_norm_sq(a) -> float:
    """Squared Hilbert-Schmidt (Frobenius) norm: sum of squared entries."""
    a = np.asarray(a, dtype=np.float64)
    return float(np.sum(a * a))


def op_norm(a) -> float:
    """Operator (spectral) norm: the largest singular value."""
    a = check_matrix(a, "op_norm input")
    return float(np.linalg.norm(a, 2))
