"""Covariance estimation and score functionals with analytic gradients.

Four scores are provided, all functions of uncentered feature covariances:

* projection score  ``||Cx^{+/2} Cxy Cy^{+/2}||_HS^2 - gamma*(R(Cx)+R(Cy))``
* relaxed score     ``||Cxy||_HS^2 / (||Cx|| ||Cy||) - gamma*(R(Cx)+R(Cy))``
* ridge score       ``||(Cx+lam)^{-1/2} Cxy (Cy+lam)^{-1/2}||_HS^2``
* generator score   ``tr(Cx^+ sym(Cxd)) - gamma*R(Cx)``

where R is the metric-distortion penalty ``tr(C^2 - C - ln C)``, zero
exactly when C is the identity.  Each ``*_grad`` variant also returns the
gradient of the score with respect to the batch feature matrices, which the
trainer pulls back through the feature map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import (
    DEFAULT_RTOL,
    NotPSDError,
    hs_norm_sq,
)

EPS_LOG = 1e-10  # eigenvalue clamp applied inside ln in the distortion penalty

# PSD slack allowed for empirical covariances (roundoff from Gram products)
_PSD_SLACK = 1e-10


class DegenerateBatchError(ValueError):
    """A covariance needed by the score is (numerically) zero."""


@dataclass(frozen=True)
class CovarianceTriple:
    """Uncentered covariances of a paired feature batch of size m."""

    cov_x: np.ndarray  # (r, r) symmetric PSD
    cov_xp: np.ndarray  # (r, r) symmetric PSD
    cov_cross: np.ndarray  # (r, r)
    m: int

    def validate(self) -> None:
        for name, c in (("cov_x", self.cov_x), ("cov_xp", self.cov_xp)):
            if not np.allclose(c, c.T, atol=1e-12, rtol=0.0):
                raise ValueError(f"{name} is not symmetric within 1e-12")
            lam = np.linalg.eigvalsh(c)
            if lam[-1] > 0 and lam[0] < -_PSD_SLACK * lam[-1]:
                raise NotPSDError(f"{name} has a significantly negative eigenvalue")


@dataclass(frozen=True)
class GeneratorCovariances:
    """Covariance of the features and cross-covariance with their Ito derivative."""

    cov_x: np.ndarray  # (r, r) symmetric PSD
    cov_xd: np.ndarray  # (r, r), not symmetric in general
    m: int

    @property
    def asymmetry(self) -> float:
        """Residual ||Cxd - Cxd^T|| / max(1, ||Cxd||); large values mean the
        self-adjointness assumption behind the generator score is violated."""
        a = self.cov_xd
        return float(
            np.linalg.norm(a - a.T) / max(1.0, np.linalg.norm(a))
        )


@dataclass(frozen=True)
class ScoreValue:
    """A score evaluation split into its terms.

    ``total = correlation - gamma * (distortion_x + distortion_xp)``;
    ``cond_x``/``cond_xp`` are the covariance condition numbers
    lambda_1/lambda_r, the main stability diagnostics of the whitening.
    """

    total: float
    correlation: float
    distortion_x: float
    distortion_xp: float
    gamma: float
    cond_x: float = float("nan")
    cond_xp: float = float("nan")

    @property
    def distortion_penalty(self) -> float:
        return self.distortion_x + self.distortion_xp


CSV_HEADER = (
    "score_total",
    "correlation_term",
    "distortion_X",
    "distortion_Xp",
    "cond_CX",
    "cond_CXp",
)


def csv_row(value: ScoreValue) -> tuple[float, ...]:
    return (
        value.total,
        value.correlation,
        value.distortion_x,
        value.distortion_xp,
        value.cond_x,
        value.cond_xp,
    )


# -- covariances ---------------------------------------------------------


def estimate_covariances(psi: np.ndarray, psi_p: np.ndarray) -> CovarianceTriple:
    """Empirical covariances of paired feature batches (columns = samples)."""
    psi = np.asarray(psi, dtype=np.float64)
    psi_p = np.asarray(psi_p, dtype=np.float64)
    if psi.ndim != 2 or psi_p.ndim != 2:
        raise ValueError("feature batches must be 2-d (r, m)")
    if psi.shape != psi_p.shape:
        raise ValueError(f"feature batches must match, got {psi.shape} vs {psi_p.shape}")
    m = psi.shape[1]
    if m < 1:
        raise ValueError("empty batch")
    cx = psi @ psi.T / m
    cxp = psi_p @ psi_p.T / m
    return CovarianceTriple(
        cov_x=0.5 * (cx + cx.T),
        cov_xp=0.5 * (cxp + cxp.T),
        cov_cross=psi @ psi_p.T / m,
        m=m,
    )


def generator_covariances(psi: np.ndarray, dpsi: np.ndarray) -> GeneratorCovariances:
    """Covariances from matched batches of features and their Ito derivatives."""
    psi = np.asarray(psi, dtype=np.float64)
    dpsi = np.asarray(dpsi, dtype=np.float64)
    if psi.shape != dpsi.shape or psi.ndim != 2:
        raise ValueError("psi and dpsi must be matching (r, m) batches")
    m = psi.shape[1]
    if m < 1:
        raise ValueError("empty batch")
    cx = psi @ psi.T / m
    return GeneratorCovariances(
        cov_x=0.5 * (cx + cx.T), cov_xd=psi @ dpsi.T / m, m=m
    )


# -- spectral helpers ----------------------------------------------------


def _psd_eig(c: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    """eigh in descending order, with the PSD slack check."""
    c = 0.5 * (c + c.T)
    lam, v = np.linalg.eigh(c)
    lam = lam[::-1].copy()
    v = v[:, ::-1].copy()
    if lam[0] > 0 and lam[-1] < -_PSD_SLACK * max(lam[0], 1.0):
        raise NotPSDError(f"{name} is not PSD")
    return lam, v


def _apply_fn(lam, v, f_lam):
    return (v * f_lam) @ v.T


def _fn_vjp(lam, v, f_lam, fp_lam, g) -> np.ndarray:
    """Adjoint of C -> f(C) for symmetric C through its eigendecomposition.

    Uses divided differences off-diagonal and f' on (numerically) repeated
    eigenvalues; truncated modes carry f = f' = 0 and hence get no gradient.
    """
    gt = v.T @ (0.5 * (g + g.T)) @ v
    dl = lam[:, None] - lam[None, :]
    df = f_lam[:, None] - f_lam[None, :]
    scale = np.maximum(np.abs(lam[:, None]), np.abs(lam[None, :]))
    close = np.abs(dl) <= 1e-12 * np.maximum(scale, 1.0)
    fdiv = np.where(close, 0.5 * (fp_lam[:, None] + fp_lam[None, :]), df / np.where(close, 1.0, dl))
    return v @ (fdiv * gt) @ v.T


def _cond(lam: np.ndarray) -> float:
    top = float(lam[0])
    bot = float(lam[-1])
    if top <= 0.0:
        return float("nan")
    if bot <= 0.0:
        return float("inf")
    return top / bot


# -- metric distortion -----------------------------------------------------


def metric_distortion_eigvals(lam: np.ndarray) -> float:
    lam = np.asarray(lam, dtype=np.float64)
    return float(np.sum(lam * lam - lam - np.log(np.maximum(lam, EPS_LOG))))


def metric_distortion(c: np.ndarray) -> float:
    """Distortion penalty tr(C^2 - C - ln C); nonnegative, zero iff C = I.

    Eigenvalues are clamped to EPS_LOG inside the logarithm so a collapsing
    feature produces a large-but-finite penalty instead of an infinity.
    """
    lam, _ = _psd_eig(np.asarray(c, dtype=np.float64), "metric_distortion input")
    return metric_distortion_eigvals(lam)


def _distortion_grad(lam, v) -> tuple[float, np.ndarray]:
    value = metric_distortion_eigvals(lam)
    dlam = 2.0 * lam - 1.0 - np.where(lam > EPS_LOG, 1.0 / np.maximum(lam, EPS_LOG), 0.0)
    return value, _apply_fn(lam, v, dlam)


# -- projection score ------------------------------------------------------


def _pinv_sqrt_fns(lam: np.ndarray, rtol: float):
    cut = rtol * max(float(lam[0]), 0.0)
    keep = lam > cut
    safe = np.where(keep, lam, 1.0)
    f = np.where(keep, 1.0 / np.sqrt(safe), 0.0)
    fp = np.where(keep, -0.5 * safe ** (-1.5), 0.0)
    return f, fp


def score_P(
    cov: CovarianceTriple, gamma: float = 0.0, rtol: float = DEFAULT_RTOL
) -> ScoreValue:
    """Projection score: squared HS norm of the whitened cross-covariance
    minus the distortion penalties."""
    lx, vx = _psd_eig(cov.cov_x, "cov_x")
    ly, vy = _psd_eig(cov.cov_xp, "cov_xp")
    fx, _ = _pinv_sqrt_fns(lx, rtol)
    fy, _ = _pinv_sqrt_fns(ly, rtol)
    mx = _apply_fn(lx, vx, fx)
    my = _apply_fn(ly, vy, fy)
    corr = hs_norm_sq(mx @ cov.cov_cross @ my)
    dx = metric_distortion_eigvals(lx)
    dxp = metric_distortion_eigvals(ly)
    return ScoreValue(
        total=corr - gamma * (dx + dxp),
        correlation=corr,
        distortion_x=dx,
        distortion_xp=dxp,
        gamma=gamma,
        cond_x=_cond(lx),
        cond_xp=_cond(ly),
    )


def score_P_grad(
    psi: np.ndarray,
    psi_p: np.ndarray,
    gamma: float = 0.0,
    rtol: float = DEFAULT_RTOL,
) -> tuple[ScoreValue, np.ndarray, np.ndarray]:
    """Projection score plus its gradient with respect to the feature batches.

    The gradient flows through the pseudo-inverse square roots via the
    eigendecomposition chain rule; truncated modes receive zero gradient,
    which isolates (rather than hides) the instability near rank changes.
    """
    cov = estimate_covariances(psi, psi_p)
    m = cov.m
    lx, vx = _psd_eig(cov.cov_x, "cov_x")
    ly, vy = _psd_eig(cov.cov_xp, "cov_xp")
    fx, fxp = _pinv_sqrt_fns(lx, rtol)
    fy, fyp = _pinv_sqrt_fns(ly, rtol)
    mx = _apply_fn(lx, vx, fx)
    my = _apply_fn(ly, vy, fy)
    a = mx @ cov.cov_cross @ my
    corr = hs_norm_sq(a)

    g_cross = 2.0 * mx @ a @ my
    k = cov.cov_cross @ my  # a = mx @ k
    g_mx = a @ k.T + k @ a.T
    z = mx @ cov.cov_cross  # a = z @ my
    g_my = z.T @ a + a.T @ z
    gx = _fn_vjp(lx, vx, fx, fxp, g_mx)
    gy = _fn_vjp(ly, vy, fy, fyp, g_my)
    if gamma != 0.0:
        dx, rx = _distortion_grad(lx, vx)
        dxp, ry = _distortion_grad(ly, vy)
        gx = gx - gamma * rx
        gy = gy - gamma * ry
    else:
        dx = metric_distortion_eigvals(lx)
        dxp = metric_distortion_eigvals(ly)

    g_psi = (2.0 * gx @ psi + g_cross @ psi_p) / m
    g_psi_p = (2.0 * gy @ psi_p + g_cross.T @ psi) / m
    value = ScoreValue(
        total=corr - gamma * (dx + dxp),
        correlation=corr,
        distortion_x=dx,
        distortion_xp=dxp,
        gamma=gamma,
        cond_x=_cond(lx),
        cond_xp=_cond(ly),
    )
    return value, g_psi, g_psi_p


# -- relaxed score ----------------------------------------------------------


def score_S(cov: CovarianceTriple, gamma: float = 0.0) -> ScoreValue:
    """Relaxed, inversion-free score: ||Cxy||_HS^2 / (||Cx|| ||Cy||) minus
    the distortion penalties.  A lower bound for the projection score."""
    lx, vx = _psd_eig(cov.cov_x, "cov_x")
    ly, vy = _psd_eig(cov.cov_xp, "cov_xp")
    nx, ny = float(lx[0]), float(ly[0])
    if nx <= 0.0 or ny <= 0.0:
        raise DegenerateBatchError("zero covariance in relaxed score")
    corr = hs_norm_sq(cov.cov_cross) / (nx * ny)
    dx = metric_distortion_eigvals(lx)
    dxp = metric_distortion_eigvals(ly)
    return ScoreValue(
        total=corr - gamma * (dx + dxp),
        correlation=corr,
        distortion_x=dx,
        distortion_xp=dxp,
        gamma=gamma,
        cond_x=_cond(lx),
        cond_xp=_cond(ly),
    )


def score_S_grad(
    psi: np.ndarray, psi_p: np.ndarray, gamma: float = 0.0
) -> tuple[ScoreValue, np.ndarray, np.ndarray]:
    """Relaxed score plus gradient with respect to the feature batches.

    The operator norm is non-smooth at repeated leading eigenvalues; the
    subgradient along the leading eigenvector (first in sorted order) is
    used, which is correct almost everywhere and deterministic.
    """
    cov = estimate_covariances(psi, psi_p)
    m = cov.m
    lx, vx = _psd_eig(cov.cov_x, "cov_x")
    ly, vy = _psd_eig(cov.cov_xp, "cov_xp")
    nx, ny = float(lx[0]), float(ly[0])
    if nx <= 0.0 or ny <= 0.0:
        raise DegenerateBatchError("zero covariance in relaxed score")
    h = hs_norm_sq(cov.cov_cross)
    corr = h / (nx * ny)

    g_cross = 2.0 * cov.cov_cross / (nx * ny)
    ux = vx[:, :1]
    uy = vy[:, :1]
    gx = -(h / (nx * nx * ny)) * (ux @ ux.T)
    gy = -(h / (nx * ny * ny)) * (uy @ uy.T)
    if gamma != 0.0:
        dx, rx = _distortion_grad(lx, vx)
        dxp, ry = _distortion_grad(ly, vy)
        gx = gx - gamma * rx
        gy = gy - gamma * ry
    else:
        dx = metric_distortion_eigvals(lx)
        dxp = metric_distortion_eigvals(ly)

    g_psi = (2.0 * gx @ psi + g_cross @ psi_p) / m
    g_psi_p = (2.0 * gy @ psi_p + g_cross.T @ psi) / m
    value = ScoreValue(
        total=corr - gamma * (dx + dxp),
        correlation=corr,
        distortion_x=dx,
        distortion_xp=dxp,
        gamma=gamma,
        cond_x=_cond(lx),
        cond_xp=_cond(ly),
    )
    return value, g_psi, g_psi_p


# -- ridge-regularized baseline ---------------------------------------------


def score_ridge(
    cov: CovarianceTriple, lam_reg: float, gamma: float = 0.0
) -> ScoreValue:
    """Ridge-whitened correlation ||(Cx+lam)^{-1/2} Cxy (Cy+lam)^{-1/2}||_HS^2.

    Always finite for lam_reg > 0; the classical regularized baseline.  The
    optional distortion penalty (gamma, default 0) mirrors the other scores.
    """
    if lam_reg <= 0.0:
        raise ValueError("lam_reg must be positive")
    lx, vx = _psd_eig(cov.cov_x, "cov_x")
    ly, vy = _psd_eig(cov.cov_xp, "cov_xp")
    mx = _apply_fn(lx, vx, (lx + lam_reg) ** -0.5)
    my = _apply_fn(ly, vy, (ly + lam_reg) ** -0.5)
    corr = hs_norm_sq(mx @ cov.cov_cross @ my)
    dx = metric_distortion_eigvals(lx)
    dxp = metric_distortion_eigvals(ly)
    return ScoreValue(
        total=corr - gamma * (dx + dxp),
        correlation=corr,
        distortion_x=dx,
        distortion_xp=dxp,
        gamma=gamma,
        cond_x=_cond(lx + lam_reg),
        cond_xp=_cond(ly + lam_reg),
    )


def score_ridge_grad(
    psi: np.ndarray, psi_p: np.ndarray, lam_reg: float, gamma: float = 0.0
) -> tuple[ScoreValue, np.ndarray, np.ndarray]:
    """Ridge score plus gradient with respect to the feature batches."""
    if lam_reg <= 0.0:
        raise ValueError("lam_reg must be positive")
    cov = estimate_covariances(psi, psi_p)
    m = cov.m
    lx, vx = _psd_eig(cov.cov_x, "cov_x")
    ly, vy = _psd_eig(cov.cov_xp, "cov_xp")
    fx = (lx + lam_reg) ** -0.5
    fxp = -0.5 * (lx + lam_reg) ** -1.5
    fy = (ly + lam_reg) ** -0.5
    fyp = -0.5 * (ly + lam_reg) ** -1.5
    mx = _apply_fn(lx, vx, fx)
    my = _apply_fn(ly, vy, fy)
    a = mx @ cov.cov_cross @ my
    corr = hs_norm_sq(a)

    g_cross = 2.0 * mx @ a @ my
    k = cov.cov_cross @ my
    g_mx = a @ k.T + k @ a.T
    z = mx @ cov.cov_cross
    g_my = z.T @ a + a.T @ z
    gx = _fn_vjp(lx, vx, fx, fxp, g_mx)
    gy = _fn_vjp(ly, vy, fy, fyp, g_my)
    if gamma != 0.0:
        dx, rx = _distortion_grad(lx, vx)
        dxp, ry = _distortion_grad(ly, vy)
        gx = gx - gamma * rx
        gy = gy - gamma * ry
    else:
        dx = metric_distortion_eigvals(lx)
        dxp = metric_distortion_eigvals(ly)

    g_psi = (2.0 * gx @ psi + g_cross @ psi_p) / m
    g_psi_p = (2.0 * gy @ psi_p + g_cross.T @ psi) / m
    value = ScoreValue(
        total=corr - gamma * (dx + dxp),
        correlation=corr,
        distortion_x=dx,
        distortion_xp=dxp,
        gamma=gamma,
        cond_x=_cond(lx + lam_reg),
        cond_xp=_cond(ly + lam_reg),
    )
    return value, g_psi, g_psi_p


# -- generator score ----------------------------------------------------------


def _pinv_fns(lam: np.ndarray, rtol: float):
    cut = rtol * max(float(lam[0]), 0.0)
    keep = lam > cut
    safe = np.where(keep, lam, 1.0)
    f = np.where(keep, 1.0 / safe, 0.0)
    fp = np.where(keep, -1.0 / (safe * safe), 0.0)
    return f, fp


def score_generator(
    cov: GeneratorCovariances, gamma: float = 0.0, rtol: float = DEFAULT_RTOL
) -> ScoreValue:
    """Partial-trace score tr(Cx^+ sym(Cxd)) - gamma*R(Cx).

    Cxd is symmetrized (self-adjoint generator assumption); the correlation
    term equals the sum of generalized eigenvalues of (sym(Cxd), Cx) on the
    range of Cx.
    """
    lx, vx = _psd_eig(cov.cov_x, "cov_x")
    f, _ = _pinv_fns(lx, rtol)
    cx_pinv = _apply_fn(lx, vx, f)
    s = 0.5 * (cov.cov_xd + cov.cov_xd.T)
    corr = float(np.trace(cx_pinv @ s))
    dx = metric_distortion_eigvals(lx)
    return ScoreValue(
        total=corr - gamma * dx,
        correlation=corr,
        distortion_x=dx,
        distortion_xp=0.0,
        gamma=gamma,
        cond_x=_cond(lx),
    )


def score_generator_grad(
    psi: np.ndarray,
    dpsi: np.ndarray,
    gamma: float = 0.0,
    rtol: float = DEFAULT_RTOL,
) -> tuple[ScoreValue, np.ndarray, np.ndarray]:
    """Generator score plus gradients with respect to psi and its Ito
    derivative batch dpsi."""
    cov = generator_covariances(psi, dpsi)
    m = cov.m
    lx, vx = _psd_eig(cov.cov_x, "cov_x")
    f, fp = _pinv_fns(lx, rtol)
    cx_pinv = _apply_fn(lx, vx, f)
    s = 0.5 * (cov.cov_xd + cov.cov_xd.T)
    corr = float(np.trace(cx_pinv @ s))

    g_xd = cx_pinv  # d tr(Cx^+ sym(Cxd)) / d Cxd, already symmetric
    gx = _fn_vjp(lx, vx, f, fp, s)
    if gamma != 0.0:
        dx, rx = _distortion_grad(lx, vx)
        gx = gx - gamma * rx
    else:
        dx = metric_distortion_eigvals(lx)

    g_psi = (2.0 * gx @ psi + g_xd @ dpsi) / m
    g_dpsi = g_xd.T @ psi / m
    value = ScoreValue(
        total=corr - gamma * dx,
        correlation=corr,
        distortion_x=dx,
        distortion_xp=0.0,
        gamma=gamma,
        cond_x=_cond(lx),
    )
    return value, g_psi, g_dpsi


# -- Ito derivative of features ------------------------------------------------


def _coerce_drift_diffusion(states: np.ndarray, drift, diffusion):
    """Normalize drift/diffusion callables to arrays (m, d) and (m, d, k)."""
    m, d = states.shape
    a = np.asarray(drift(states if d > 1 else states[:, 0]), dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape != (m, d):
        raise ValueError(f"drift must map states to (m, d), got {a.shape}")
    if callable(diffusion):
        b = np.asarray(diffusion(states if d > 1 else states[:, 0]), dtype=np.float64)
    else:
        b = np.asarray(diffusion, dtype=np.float64)
    if b.ndim == 0:
        b = np.broadcast_to(b.reshape(1, 1, 1), (m, d, 1))
    elif b.ndim == 1 and b.shape[0] == m:
        b = b[:, None, None]
    elif b.ndim == 2 and b.shape == (d, d):
        b = np.broadcast_to(b[None, :, :], (m, d, d))
    elif b.ndim != 3:
        raise ValueError(f"cannot interpret diffusion of shape {b.shape}")
    sig = np.einsum("mik,mjk->mij", b, b)  # B B^T per sample
    return a, sig


def ito_features(fmap, states, drift, diffusion):
    """Features and their Ito derivatives on a batch.

    ``dpsi_i(x) = grad psi_i(x) . A(x) + 0.5 tr(B(x)^T hess psi_i(x) B(x))``
    for drift A and diffusion B.  Returns (psi, dpsi, hooks, a, sig) where
    hooks supports the spatial pullback and (a, sig) are the evaluated drift
    and B B^T, reusable to pull a dpsi gradient back to parameters.
    """
    psi, grad, hess, hooks = fmap.forward_spatial(states)
    x = fmap._coerce_batch(states)
    a, sig = _coerce_drift_diffusion(x, drift, diffusion)
    dpsi = np.einsum("kmp,mp->km", grad, a) + 0.5 * np.einsum(
        "kmpq,mpq->km", hess, sig
    )
    return psi, dpsi, hooks, a, sig


def ito_dpsi(fmap, x, drift, diffusion) -> np.ndarray:
    """Ito derivative of every feature at a single state."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    _, dpsi, _, _, _ = ito_features(fmap, x[None, :], drift, diffusion)
    return dpsi[:, 0]


def dpsi_pullback(hooks, g_psi, g_dpsi, a, sig) -> np.ndarray:
    """Pull (d/dPsi, d/ddPsi) gradients back to feature-map parameters."""
    gu = g_dpsi[:, :, None] * a[None, :, :]
    gv = 0.5 * g_dpsi[:, :, None, None] * sig[None, :, :, :]
    return hooks.pullback_spatial(g_psi, gu, gv)


# -- misc -----------------------------------------------------------------


def whitened_singular_values(
    cov: CovarianceTriple, rtol: float = DEFAULT_RTOL
) -> np.ndarray:
    """Singular values of Cx^{+/2} Cxy Cy^{+/2} in descending order.

    Their squares partial-sum to truncated projection scores; summing the
    top k gives the rank-k correlation term.
    """
    lx, vx = _psd_eig(cov.cov_x, "cov_x")
    ly, vy = _psd_eig(cov.cov_xp, "cov_xp")
    fx, _ = _pinv_sqrt_fns(lx, rtol)
    fy, _ = _pinv_sqrt_fns(ly, rtol)
    a = _apply_fn(lx, vx, fx) @ cov.cov_cross @ _apply_fn(ly, vy, fy)
    return np.linalg.svd(a, compute_uv=False)
