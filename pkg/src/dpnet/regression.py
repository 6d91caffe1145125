"""Operator regression on a learned representation.

Given a feature map psi and paired data, the least-squares estimate of the
transfer operator in feature coordinates is ``T = pinv(Cx) Cxy`` (identical
to pinv(Psi^T) Psi'^T).  On top of it: one-step prediction of arbitrary
observables, spectral decomposition with biorthonormal eigen-triplets, and
multi-step forecasting by eigenvalue powers.  The continuous-time analogue
fits the generator ``L = pinv(Cx) Cxd`` from states and known
drift/diffusion, with exp(lambda t) modal forecasts.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import scores
from .features import FeatureMap, FeatureMapSpec
from .linalg import DEFAULT_RTOL, GeneralEig, general_eig, pinv_psd


@dataclass
class TransferModel:
    """Fitted r x r transfer-operator matrix plus everything prediction needs."""

    t_mat: np.ndarray  # (r, r)
    fmap: FeatureMap
    psi_train: np.ndarray  # (r, n)
    rtol: float
    ridge: float = 0.0
    lag_time: float = 1.0
    observables: dict = field(default_factory=dict)  # name -> (values (n, l), coef (r, l))
    psi_next: np.ndarray | None = None  # (r, n), features at the evolved states
    _cx_pinv: np.ndarray | None = None

    @property
    def r(self) -> int:
        return self.t_mat.shape[0]

    @property
    def n(self) -> int:
        return self.psi_train.shape[1]

    def regression_coefficients(self, values: np.ndarray) -> np.ndarray:
        """Least-squares coefficients of an observable on the feature span:
        pinv(Psi^T) @ values, an (r, l) matrix."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != self.n:
            raise ValueError(
                f"observable needs one row per training pair ({self.n}), got {values.shape[0]}"
            )
        return self._cx_pinv @ (self.psi_train @ values) / self.n

    def register_observable(self, name: str, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        self.observables[name] = (values, self.regression_coefficients(values))

    def observable_coefficients(self, observable) -> np.ndarray:
        if isinstance(observable, str):
            if observable not in self.observables:
                raise KeyError(f"observable {observable!r} not registered")
            return self.observables[observable][1]
        return self.regression_coefficients(observable)


def fit(
    fmap: FeatureMap,
    x: np.ndarray,
    x_next: np.ndarray,
    rtol: float = DEFAULT_RTOL,
    ridge: float = 0.0,
    lag_time: float = 1.0,
) -> TransferModel:
    """Ordinary (or ridge-regularized) least-squares fit of the operator.

    The empirical risk ``||Psi' - T^T Psi||_HS^2`` is minimized over all
    r x r matrices; with ``ridge`` > 0 the regularized variant
    ``(Cx + ridge*I)^{-1} Cxy`` is used instead for ill-conditioned
    representations.
    """
    psi, _ = fmap.forward(x)
    psi_p, _ = fmap.forward(x_next)
    n = psi.shape[1]
    cx = psi @ psi.T / n
    cx = 0.5 * (cx + cx.T)
    cxy = psi @ psi_p.T / n
    if not np.any(np.abs(psi) > 0):
        warnings.warn("degenerate (zero) features: fitting a rank-0 model")
    if ridge > 0.0:
        cx_pinv = np.linalg.inv(cx + ridge * np.eye(cx.shape[0]))
    else:
        cx_pinv = pinv_psd(cx, rtol)
    return TransferModel(
        t_mat=cx_pinv @ cxy,
        fmap=fmap,
        psi_train=psi,
        rtol=rtol,
        ridge=ridge,
        lag_time=lag_time,
        psi_next=psi_p,
        _cx_pinv=cx_pinv,
    )


def predict(model: TransferModel, observable, x_query) -> np.ndarray:
    """Estimate E[f(X') | X = x]: psi(x)^T pinv(Psi^T) F' per query.

    ``observable`` is either a registered name or the (n, l) array of values
    f(x'_i) on the training outputs.  Queries of shape (q, d) give (q, l).
    """
    coef = model.observable_coefficients(observable)
    psi_q, _ = model.fmap.forward(x_query)
    return psi_q.T @ coef


@dataclass
class SpectralModel:
    """Spectral decomposition of a fitted operator.

    Eigenvalues come with right vectors v_i (eigenfunctions
    f_i(x) = psi(x)^T v_i) and left vectors u_i (g_i(x) = u_i* psi(x)),
    normalized so u_i* v_k = delta_ik.
    """

    model: TransferModel
    decomposition: GeneralEig

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.decomposition.eigenvalues

    def eigenfunctions(self, x_query) -> np.ndarray:
        """Right eigenfunctions at queries: (q, r) complex."""
        psi_q, _ = self.model.fmap.forward(x_query)
        return psi_q.T @ self.decomposition.right

    def left_eigenfunctions(self, x_query) -> np.ndarray:
        psi_q, _ = self.model.fmap.forward(x_query)
        return psi_q.T @ self.decomposition.left.conj()

    def koopman_modes(self, observable) -> np.ndarray:
        """Per-mode coefficients u_i* pinv(Psi^T) F' of an observable, (r, l)."""
        coef = self.model.observable_coefficients(observable)
        return self.decomposition.left.conj().T @ coef

    def implied_timescales(self) -> np.ndarray:
        return implied_timescales(self.eigenvalues, lag_time=self.model.lag_time)


def spectral(model: TransferModel) -> SpectralModel:
    return SpectralModel(model=model, decomposition=general_eig(model.t_mat))


def _spectral_sum(smodel: SpectralModel, coef: np.ndarray, t: int, x_query) -> np.ndarray:
    """Modal forecast sum_i lambda_i^{t-1} f_i(x) (u_i* coef); zero modes
    contribute nothing for t >= 2."""
    lam = smodel.eigenvalues
    fvals = smodel.eigenfunctions(x_query)  # (q, r)
    modes = smodel.decomposition.left.conj().T @ coef  # (r, l)
    powers = np.zeros_like(lam)
    nz = lam != 0
    powers[nz] = lam[nz] ** (t - 1)
    if t == 1:
        powers[~nz] = 1.0  # lambda^0
    return (fvals * powers[None, :]) @ modes


def forecast(
    smodel: SpectralModel,
    observable,
    t: int,
    x_query,
    return_complex: bool = False,
) -> np.ndarray:
    """Multi-step forecast of an observable by eigenvalue powers.

    t = 0 returns the feature-span regression of f evaluated at the query;
    t = 1 is computed by the non-spectral prediction formula (exact, and
    immune to zero eigenvalues); t >= 2 applies spectral powers to the
    nonzero modes.  Real data produce real forecasts.
    """
    if t < 0 or int(t) != t:
        raise ValueError("horizon must be a nonnegative integer")
    model = smodel.model
    coef = model.observable_coefficients(observable)
    if t == 0:
        if model.psi_next is None:
            raise ValueError("t = 0 needs the evolved-state features cached by fit()")
        values = (
            model.observables[observable][0]
            if isinstance(observable, str)
            else np.atleast_2d(np.asarray(observable, dtype=np.float64).T).T
        )
        n = model.n
        cxp = model.psi_next @ model.psi_next.T / n
        coef0 = pinv_psd(0.5 * (cxp + cxp.T), model.rtol) @ (model.psi_next @ values) / n
        psi_q, _ = model.fmap.forward(x_query)
        out = (psi_q.T @ coef0).astype(np.complex128)
    elif t == 1:
        out = predict(model, observable, x_query).astype(np.complex128)
    else:
        out = _spectral_sum(smodel, coef, int(t), x_query)
    return out if return_complex else np.real(out)


def implied_timescales(eigenvalues, lag_time: float = 1.0, continuous: bool = False) -> np.ndarray:
    """Characteristic relaxation times: -lag/ln|lambda| for discrete models,
    -1/Re(lambda) for generators; infinite for unit/zero-rate modes."""
    lam = np.asarray(eigenvalues)
    with np.errstate(divide="ignore", invalid="ignore"):
        if continuous:
            rates = np.real(lam)
        else:
            rates = np.log(np.abs(lam)) / lag_time
        out = np.where(rates < 0, -1.0 / rates, np.inf)
    return out


# -- generator regression -----------------------------------------------------


@dataclass
class GeneratorModel:
    """Fitted generator matrix L = pinv(Cx) Cxd with spectral data.

    Eigenvalues are sorted by descending real part (the stationary mode
    first); ``pencil_eigenvalues`` holds the symmetrized diagnostic spectrum
    of (sym(Cxd), Cx) used for timescales under the self-adjoint assumption.
    """

    l_mat: np.ndarray
    fmap: FeatureMap
    psi_train: np.ndarray
    rtol: float
    decomposition: GeneralEig
    pencil_eigenvalues: np.ndarray
    asymmetry: float
    _cx_pinv: np.ndarray | None = None

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.decomposition.eigenvalues

    @property
    def n(self) -> int:
        return self.psi_train.shape[1]

    def implied_timescales(self) -> np.ndarray:
        return implied_timescales(self.eigenvalues, continuous=True)

    def regression_coefficients(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != self.n:
            raise ValueError("observable needs one row per training state")
        return self._cx_pinv @ (self.psi_train @ values) / self.n


def fit_generator(
    fmap: FeatureMap,
    x: np.ndarray,
    drift,
    diffusion,
    rtol: float = DEFAULT_RTOL,
) -> GeneratorModel:
    """Least-squares generator fit from states and known drift/diffusion."""
    psi, dpsi, _, _, _ = scores.ito_features(fmap, x, drift, diffusion)
    gc = scores.generator_covariances(psi, dpsi)
    cx_pinv = pinv_psd(gc.cov_x, rtol)
    l_mat = cx_pinv @ gc.cov_xd
    eig = general_eig(l_mat)
    order = np.lexsort((-eig.eigenvalues.imag, -eig.eigenvalues.real))
    eig = GeneralEig(
        eigenvalues=eig.eigenvalues[order],
        right=eig.right[:, order],
        left=eig.left[:, order],
        ill_conditioned=eig.ill_conditioned,
    )
    sym = 0.5 * (gc.cov_xd + gc.cov_xd.T)
    mx = pinv_psd(gc.cov_x, rtol)
    # half-whitened pencil spectrum; zeros pad truncated directions
    half = np.linalg.eigvalsh(
        _sqrt_psd(mx) @ sym @ _sqrt_psd(mx)
    )[::-1]
    return GeneratorModel(
        l_mat=l_mat,
        fmap=fmap,
        psi_train=psi,
        rtol=rtol,
        decomposition=eig,
        pencil_eigenvalues=half,
        asymmetry=gc.asymmetry,
        _cx_pinv=cx_pinv,
    )


def _sqrt_psd(a: np.ndarray) -> np.ndarray:
    lam, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.maximum(lam, 0.0))) @ v.T


def forecast_generator(
    gmodel: GeneratorModel, observable_values, t: float, x_query
) -> np.ndarray:
    """Continuous-time modal forecast sum_i exp(lambda_i t) f_i(x) u_i* coef."""
    coef = gmodel.regression_coefficients(observable_values)
    psi_q, _ = gmodel.fmap.forward(x_query)
    fvals = psi_q.T @ gmodel.decomposition.right
    modes = gmodel.decomposition.left.conj().T @ coef
    return np.real((fvals * np.exp(gmodel.eigenvalues * t)[None, :]) @ modes)


# -- serialization -------------------------------------------------------------


def save_model(model, prefix) -> None:
    """Write ``<prefix>.json`` (dims, rtol, eigenvalues, block table) plus
    ``<prefix>.bin`` with float64 blocks for the operator matrix, training
    features, feature-map parameters and observable caches."""
    prefix = Path(prefix)
    is_gen = isinstance(model, GeneratorModel)
    mat = model.l_mat if is_gen else model.t_mat
    eigs = (
        model.eigenvalues
        if is_gen
        else general_eig(mat).eigenvalues
    )
    blocks = [
        ("operator", np.asarray(mat, dtype="<f8")),
        ("psi_train", np.asarray(model.psi_train, dtype="<f8")),
        ("params", np.asarray(model.fmap.params, dtype="<f8")),
    ]
    if not is_gen and model.psi_next is not None:
        blocks.append(("psi_next", np.asarray(model.psi_next, dtype="<f8")))
    obs_meta = []
    if not is_gen:
        for name, (values, _) in model.observables.items():
            blocks.append((f"obs:{name}", np.asarray(values, dtype="<f8")))
            obs_meta.append(name)
    header = {
        "kind": "generator" if is_gen else "transfer",
        "r": mat.shape[0],
        "n": model.psi_train.shape[1],
        "rtol": model.rtol,
        "ridge": 0.0 if is_gen else model.ridge,
        "lag_time": 1.0 if is_gen else model.lag_time,
        "eigenvalues": [[float(z.real), float(z.imag)] for z in np.asarray(eigs, dtype=complex)],
        "feature_spec": json.loads(model.fmap.spec.to_json()),
        "observables": obs_meta,
        "blocks": [{"name": n, "shape": list(b.shape)} for n, b in blocks],
    }
    prefix.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        for _, b in blocks:
            fh.write(np.ascontiguousarray(b).tobytes())


def load_model(prefix, drift=None, diffusion=None):
    """Inverse of :func:`save_model`.  Generator models need the drift and
    diffusion callables re-supplied (they are not serializable)."""
    prefix = Path(prefix)
    header = json.loads(prefix.with_suffix(".json").read_text())
    raw = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8")
    out = {}
    ofs = 0
    for blk in header["blocks"]:
        size = int(np.prod(blk["shape"]))
        out[blk["name"]] = raw[ofs : ofs + size].reshape(blk["shape"]).copy()
        ofs += size
    spec = FeatureMapSpec(
        input_dim=header["feature_spec"]["input_dim"],
        widths=tuple(header["feature_spec"]["widths"]),
        activations=tuple(header["feature_spec"]["activations"]),
        seed=header["feature_spec"]["seed"],
        use_bias=bool(header["feature_spec"].get("use_bias", True)),
    )
    fmap = FeatureMap(spec, out["params"])
    psi = out["psi_train"]
    n = header["n"]
    cx = psi @ psi.T / n
    cx = 0.5 * (cx + cx.T)
    if header["kind"] == "transfer":
        if header["ridge"] > 0.0:
            cx_pinv = np.linalg.inv(cx + header["ridge"] * np.eye(cx.shape[0]))
        else:
            cx_pinv = pinv_psd(cx, header["rtol"])
        model = TransferModel(
            t_mat=out["operator"],
            fmap=fmap,
            psi_train=psi,
            rtol=header["rtol"],
            ridge=header["ridge"],
            lag_time=header["lag_time"],
            psi_next=out.get("psi_next"),
            _cx_pinv=cx_pinv,
        )
        for name in header["observables"]:
            model.register_observable(name, out[f"obs:{name}"])
        return model
    eig = general_eig(out["operator"])
    order = np.lexsort((-eig.eigenvalues.imag, -eig.eigenvalues.real))
    eig = GeneralEig(
        eigenvalues=eig.eigenvalues[order],
        right=eig.right[:, order],
        left=eig.left[:, order],
        ill_conditioned=eig.ill_conditioned,
    )
    return GeneratorModel(
        l_mat=out["operator"],
        fmap=fmap,
        psi_train=psi,
        rtol=header["rtol"],
        decomposition=eig,
        pencil_eigenvalues=np.array([]),
        asymmetry=float("nan"),
        _cx_pinv=pinv_psd(cx, header["rtol"]),
    )


def export_eigenvalues_csv(eigenvalues, path, lag_time: float = 1.0, continuous: bool = False) -> None:
    """CSV with one eigenvalue per row: modulus, real, imag, implied timescale."""
    lam = np.asarray(eigenvalues, dtype=complex).ravel()
    tau = implied_timescales(lam, lag_time=lag_time, continuous=continuous)
    with open(path, "w") as fh:
        fh.write("modulus,real,imag,implied_timescale\n")
        for z, t in zip(lam, tau):
            fh.write(f"{abs(z):.17g},{z.real:.17g},{z.imag:.17g},{t:.17g}\n")
