"""Benchmark dynamical systems, exact oracles and evaluation metrics.

Three desk-scale systems are provided:

* a noisy logistic map ``x' = (4x(1-x) + xi) mod 1`` with trigonometric
  noise, whose transfer operator is discretized by quadrature on a uniform
  grid weighted by the estimated invariant density;
* a 1-d overdamped Langevin SDE ``dX = -V'(X) dt + sqrt(2/beta) dW`` in a
  polynomial potential, whose generator ``L f = -V' f' + f''/beta`` is
  discretized by conservative central finite differences with reflecting
  boundaries (self-adjoint under the Boltzmann weight by construction);
* a linear autoregression ``x' = a x + s xi`` with every quantity available
  in closed form.

The dense discretizations act as ground truth for scores, spectra and the
evaluation metrics (spectral error, optimality gap).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PairedData
from .linalg import DEFAULT_RTOL, eig_sort_order, pinv_psd
from .scores import CovarianceTriple, GeneratorCovariances


# -- noise density ---------------------------------------------------------


class TrigonometricNoise:
    """Noise density proportional to cos(pi*xi)^N on [-1/2, 1/2], N even.

    The density vanishes to high order at the support boundary, so the
    periodized transition kernel it induces is smooth across the wrap and
    midpoint quadrature converges superalgebraically.
    """

    def __init__(self, order: int, table_size: int = 16385):
        if order < 2 or order % 2 != 0:
            raise ValueError("noise order must be a positive even integer")
        self.order = order
        xs = np.linspace(-0.5, 0.5, table_size)
        raw = np.cos(np.pi * xs) ** order
        # normalization by quadrature (trapezoid on the dense table)
        z = np.trapezoid(raw, xs)
        self._xs = xs
        self._pdf = raw / z
        cdf = np.concatenate([[0.0], np.cumsum((self._pdf[1:] + self._pdf[:-1]) * 0.5 * np.diff(xs))])
        self._cdf = cdf / cdf[-1]

    def pdf(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=np.float64)
        out = np.where(np.abs(xi) <= 0.5, np.cos(np.pi * xi) ** self.order, 0.0)
        return out / np.trapezoid(np.cos(np.pi * self._xs) ** self.order, self._xs)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        u = rng.random(size)
        return np.interp(u, self._cdf, self._xs)


# -- systems ----------------------------------------------------------------


@dataclass
class LogisticMapSystem:
    """Noisy logistic map on [0, 1) with trigonometric noise."""

    noise_order: int = 20
    grid_size: int = 1024
    seed: int = 0

    def __post_init__(self):
        if self.noise_order % 2 != 0:
            raise ValueError("noise_order must be even")
        self._noise = TrigonometricNoise(self.noise_order)

    @staticmethod
    def map(x):
        return 4.0 * x * (1.0 - x)

    def sample_trajectory(
        self, n: int, seed: int | None = None, burn_in: int = 200
    ) -> PairedData:
        """n consecutive pairs (x_t, x_{t+1}) from one trajectory, after
        burn-in from a uniform start; deterministic per seed."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        xi = self._noise.sample(rng, burn_in + n)
        x = float(rng.random())
        for k in range(burn_in):
            x = (self.map(x) + xi[k]) % 1.0
        traj = np.empty(n + 1)
        traj[0] = x
        for k in range(n):
            x = (self.map(x) + xi[burn_in + k]) % 1.0
            traj[k + 1] = x
        return PairedData(x=traj[:-1], x_next=traj[1:])

    def oracle(self, grid_size: int | None = None) -> "OperatorOracle":
        return logistic_oracle(self.noise_order, grid_size or self.grid_size)


@dataclass
class LangevinSystem:
    """Overdamped Langevin dynamics in a 1-d polynomial potential.

    ``potential`` holds polynomial coefficients, highest degree first (the
    numpy.polyval convention); the default is the symmetric double well
    (x^2 - 1)^2.  The invariant law is the Boltzmann distribution
    exp(-beta*V)/Z on the (reflecting) domain.
    """

    potential: tuple[float, ...] = (1.0, 0.0, -2.0, 0.0, 1.0)
    beta: float = 1.0
    dt: float = 1e-3
    domain: tuple[float, float] = (-2.5, 2.5)
    grid_size: int = 1024
    seed: int = 0

    def __post_init__(self):
        self.potential = tuple(float(c) for c in self.potential)
        if self.beta <= 0 or self.dt <= 0:
            raise ValueError("beta and dt must be positive")
        lo, hi = self.domain
        if not lo < hi:
            raise ValueError("empty domain")
        self._dV = np.polyder(np.poly1d(self.potential))
        self._d2V = np.polyder(self._dV)
        xs = np.linspace(lo, hi, 512)
        if self.dt * float(np.max(np.abs(self._d2V(xs)))) >= 2.0:
            raise ValueError(
                "dt too large for a stable Euler-Maruyama step on this domain"
            )

    def V(self, x):
        return np.polyval(self.potential, x)

    def drift(self, x):
        return -self._dV(x)

    @property
    def diffusion(self) -> float:
        return float(np.sqrt(2.0 / self.beta))

    def sample_states(
        self, n: int, seed: int | None = None, burn_in: int = 10_000, stride: int = 10
    ) -> np.ndarray:
        """n states from one Euler-Maruyama trajectory, recorded every
        ``stride`` steps after burn-in."""
        rng = np.random.default_rng(self.seed if seed is None else seed)
        total = burn_in + n * stride
        noise = rng.standard_normal(total) * (self.diffusion * np.sqrt(self.dt))
        lo, hi = self.domain
        x = 0.5 * (lo + hi)
        out = np.empty(n)
        j = 0
        for k in range(total):
            x = x + self.drift(x) * self.dt + noise[k]
            x = min(max(x, lo), hi)
            if k >= burn_in and (k - burn_in) % stride == stride - 1:
                out[j] = x
                j += 1
        return out

    def sample_trajectory(
        self,
        n: int,
        seed: int | None = None,
        lag_steps: int = 100,
        burn_in: int = 10_000,
        geometric_p: float | None = None,
    ) -> PairedData:
        """n pairs from one trajectory, spaced ``lag_steps`` EM steps apart.

        With ``geometric_p`` set, each spacing is drawn from a geometric law
        instead and the per-pair lag times are recorded on the dataset.
        """
        rng = np.random.default_rng(self.seed if seed is None else seed)
        if geometric_p is not None:
            spacings = rng.geometric(geometric_p, size=n)
        else:
            spacings = np.full(n, lag_steps, dtype=np.int64)
        total = burn_in + int(spacings.sum())
        noise = rng.standard_normal(total) * (self.diffusion * np.sqrt(self.dt))
        lo, hi = self.domain
        x = 0.5 * (lo + hi)
        for k in range(burn_in):
            x = x + self.drift(x) * self.dt + noise[k]
            x = min(max(x, lo), hi)
        states = np.empty(n + 1)
        states[0] = x
        pos = burn_in
        for i, gap in enumerate(spacings):
            for k in range(pos, pos + gap):
                x = x + self.drift(x) * self.dt + noise[k]
                x = min(max(x, lo), hi)
            pos += gap
            states[i + 1] = x
        lags = spacings * self.dt if geometric_p is not None else None
        return PairedData(x=states[:-1], x_next=states[1:], lags=lags)

    def boltzmann_density(self, xs: np.ndarray) -> np.ndarray:
        """Normalized invariant density on the domain (dense-grid quadrature)."""
        lo, hi = self.domain
        grid = np.linspace(lo, hi, 8193)
        raw = np.exp(-self.beta * (self.V(grid) - np.min(self.V(grid))))
        z = np.trapezoid(raw, grid)
        return np.exp(-self.beta * (self.V(xs) - np.min(self.V(grid)))) / z

    def generator_oracle(self, grid_size: int | None = None) -> "OperatorOracle":
        return langevin_generator_oracle(self, grid_size or self.grid_size)


@dataclass
class LinearSystem:
    """Stationary linear autoregression x' = a x + s xi, |a| < 1.

    Diagonal multi-dimensional variants take a vector of coefficients.
    Everything about it is closed form, which makes it the bootstrap test
    system for fitting and forecasting.
    """

    a: float | tuple[float, ...] = 0.7
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.a, dtype=np.float64))
        if np.any(np.abs(a) >= 1.0):
            raise ValueError("stationarity requires |a| < 1")
        self._a = a

    @property
    def dim(self) -> int:
        return self._a.size

    @property
    def coefficients(self) -> np.ndarray:
        return self._a

    @property
    def stationary_std(self) -> np.ndarray:
        if self.noise_std == 0.0:
            return np.ones_like(self._a)  # degenerate; any scale works
        return self.noise_std / np.sqrt(1.0 - self._a**2)

    def sample_trajectory(self, n: int, seed: int | None = None) -> PairedData:
        rng = np.random.default_rng(self.seed if seed is None else seed)
        d = self.dim
        x = rng.standard_normal(d) * self.stationary_std
        traj = np.empty((n + 1, d))
        traj[0] = x
        noise = rng.standard_normal((n, d)) * self.noise_std
        for k in range(n):
            x = self._a * x + noise[k]
            traj[k + 1] = x
        return PairedData(x=traj[:-1], x_next=traj[1:])


# -- oracles ----------------------------------------------------------------


@dataclass
class OperatorOracle:
    """Exact discretized transfer operator or generator on a grid.

    ``matrix`` is the dense operator in the grid basis (row-stochastic
    transition kernel for transfer oracles, row-sum-zero generator for
    generator oracles) and ``weights`` are the invariant-measure quadrature
    weights defining the inner product <f, g> = sum_g w_g f_g g_g.  Spectral
    data is computed on first access and cached.
    """

    kind: str  # "transfer" | "generator"
    grid: np.ndarray  # (G,)
    weights: np.ndarray  # (G,), positive, sums to 1
    matrix: np.ndarray  # (G, G)
    _singular_values: np.ndarray | None = field(default=None, repr=False)
    _eigenvalues: np.ndarray | None = field(default=None, repr=False)
    _whitened: np.ndarray | None = field(default=None, repr=False)
    _svd: tuple | None = field(default=None, repr=False)
    _eigh: tuple | None = field(default=None, repr=False)

    @property
    def grid_size(self) -> int:
        return self.grid.size

    @property
    def singular_values(self) -> np.ndarray:
        """Singular values of the operator on the weighted L2 space,
        descending."""
        if self._singular_values is None:
            if self.kind == "generator":
                self._singular_values = np.abs(self.eigenvalues)
            else:
                self._singular_values = np.linalg.svd(
                    self.whitened_matrix(), compute_uv=False
                )
        return self._singular_values

    @property
    def eigenvalues(self) -> np.ndarray:
        """Operator eigenvalues: complex, modulus-descending for transfer
        kernels; real, descending (stationary zero first) for generators."""
        if self._eigenvalues is None:
            if self.kind == "generator":
                s = self.whitened_matrix()
                lam = np.linalg.eigvalsh(0.5 * (s + s.T))
                self._eigenvalues = lam[::-1].copy()
            else:
                eigs = np.linalg.eigvals(self.matrix)
                self._eigenvalues = eigs[eig_sort_order(eigs)]
        return self._eigenvalues

    def whitened_matrix(self) -> np.ndarray:
        """The operator conjugated into the weighted inner product,
        sqrt(W) M / sqrt(W); unitarily equivalent to the operator on L2."""
        if self._whitened is None:
            sw = np.sqrt(self.weights)
            self._whitened = (self.matrix * sw[:, None]) / sw[None, :]
        return self._whitened

    # quadrature covariances for feature rows evaluated on the grid ---------

    def covariances(
        self, psi_grid: np.ndarray, psi_p_grid: np.ndarray | None = None
    ) -> CovarianceTriple:
        """Population covariances of grid-evaluated features under the
        invariant measure and the transfer kernel."""
        if self.kind != "transfer":
            raise ValueError("covariances() needs a transfer oracle")
        psi = np.asarray(psi_grid, dtype=np.float64)
        psi_p = psi if psi_p_grid is None else np.asarray(psi_p_grid, dtype=np.float64)
        w = self.weights
        cx = (psi * w) @ psi.T
        cxp = (psi_p * w) @ psi_p.T
        cross = (psi * w) @ (self.matrix @ psi_p.T)
        return CovarianceTriple(
            cov_x=0.5 * (cx + cx.T),
            cov_xp=0.5 * (cxp + cxp.T),
            cov_cross=cross,
            m=self.grid_size,
        )

    def generator_covariances(self, psi_grid: np.ndarray) -> GeneratorCovariances:
        if self.kind != "generator":
            raise ValueError("generator_covariances() needs a generator oracle")
        psi = np.asarray(psi_grid, dtype=np.float64)
        w = self.weights
        cx = (psi * w) @ psi.T
        cxd = (psi * w) @ (self.matrix @ psi.T)
        return GeneratorCovariances(
            cov_x=0.5 * (cx + cx.T), cov_xd=cxd, m=self.grid_size
        )

    # exact spectral data and feature extraction ---------------------------

    def _full_svd(self):
        if self._svd is None:
            self._svd = np.linalg.svd(self.whitened_matrix())
        return self._svd

    def left_singular_features(self, r: int) -> np.ndarray:
        """Leading left singular functions evaluated on the grid, (r, G),
        orthonormal in the weighted inner product."""
        u, _, _ = self._full_svd()
        return (u[:, :r] / np.sqrt(self.weights)[:, None]).T

    def right_singular_features(self, r: int) -> np.ndarray:
        _, _, vh = self._full_svd()
        return vh[:r, :] / np.sqrt(self.weights)[None, :]

    def eigenfunction_features(self, r: int) -> np.ndarray:
        """Leading eigenfunctions of a (self-adjoint) generator oracle,
        (r, G), orthonormal in the weighted inner product."""
        if self.kind != "generator":
            raise ValueError("eigenfunction features need a generator oracle")
        if self._eigh is None:
            s = self.whitened_matrix()
            lam, v = np.linalg.eigh(0.5 * (s + s.T))
            self._eigh = (lam[::-1].copy(), v[:, ::-1].copy())
        _, v = self._eigh
        return (v[:, :r] / np.sqrt(self.weights)[:, None]).T

    def row_sum_residual(self) -> float:
        """Max |row sum - target|; target is 1 for transfer kernels, 0 for
        generators."""
        target = 1.0 if self.kind == "transfer" else 0.0
        return float(np.max(np.abs(self.matrix.sum(axis=1) - target)))


def logistic_oracle(noise_order: int, grid_size: int = 1024) -> OperatorOracle:
    """Quadrature discretization of the noisy logistic map's transfer operator.

    The kernel density is evaluated at midpoints of a uniform grid on [0, 1)
    and weighted by the invariant density estimated by power iteration, so
    all downstream quantities are internally consistent.
    """
    if grid_size < 256:
        raise ValueError("grid_size must be at least 256")
    noise = TrigonometricNoise(noise_order)
    g = grid_size
    xs = (np.arange(g) + 0.5) / g
    fx = LogisticMapSystem.map(xs)
    # displacement folded into [-1/2, 1/2)
    disp = (xs[None, :] - fx[:, None] + 0.5) % 1.0 - 0.5
    kernel = noise.pdf(disp) / g  # row-stochastic up to quadrature error

    # invariant cell masses by power iteration on the adjoint
    p = np.full(g, 1.0 / g)
    for _ in range(10_000):
        p_new = kernel.T @ p
        p_new /= p_new.sum()
        if np.max(np.abs(p_new - p)) < 1e-15:
            p = p_new
            break
        p = p_new
    return OperatorOracle(kind="transfer", grid=xs, weights=p, matrix=kernel)


def langevin_generator_oracle(
    system: LangevinSystem, grid_size: int = 1024
) -> OperatorOracle:
    """Finite-difference discretization of the overdamped Langevin generator.

    Conservative second-order differences of ``exp(beta V) d/dx (exp(-beta V)
    d/dx) / beta`` with reflecting (zero-flux) boundaries: rows sum to zero
    exactly and the matrix is self-adjoint under the Boltzmann weights, so
    its spectrum is real with a leading exact zero.
    """
    lo, hi = system.domain
    g = grid_size
    h = (hi - lo) / g
    xs = lo + (np.arange(g) + 0.5) * h
    v_shift = np.min(system.V(xs))
    pi = np.exp(-system.beta * (system.V(xs) - v_shift))
    pi_half = np.exp(-system.beta * (system.V(0.5 * (xs[:-1] + xs[1:])) - v_shift))

    up = pi_half / (system.beta * pi[:-1] * h * h)  # rate i -> i+1
    dn = pi_half / (system.beta * pi[1:] * h * h)  # rate i+1 -> i
    mat = np.zeros((g, g))
    idx = np.arange(g - 1)
    mat[idx, idx + 1] = up
    mat[idx + 1, idx] = dn
    mat[np.arange(g), np.arange(g)] = -mat.sum(axis=1)

    weights = pi * h
    weights = weights / weights.sum()
    return OperatorOracle(kind="generator", grid=xs, weights=weights, matrix=mat)


# -- evaluation metrics -------------------------------------------------------


def spectral_error(estimated, oracle_eigs, top_k: int) -> float:
    """max over the top_k estimated eigenvalues (by modulus) of the distance
    to the nearest oracle eigenvalue."""
    est = np.asarray(estimated, dtype=np.complex128).ravel()
    ref = np.asarray(oracle_eigs, dtype=np.complex128).ravel()
    if est.size == 0 or ref.size == 0:
        raise ValueError("empty eigenvalue set")
    est = est[np.argsort(-np.abs(est))][:top_k]
    return float(np.max(np.min(np.abs(est[:, None] - ref[None, :]), axis=1)))


def optimality_gap(p0: float, oracle_sigma_sq) -> float:
    """Distance of a representation's correlation score from the best
    attainable value, sum of the oracle's top squared singular values."""
    return float(np.sum(np.asarray(oracle_sigma_sq, dtype=np.float64)) - p0)


def compressed_operator(
    oracle: OperatorOracle, psi_grid: np.ndarray, rtol: float = DEFAULT_RTOL
) -> np.ndarray:
    """Matrix of the oracle operator compressed onto the span of the given
    features (population-level operator regression)."""
    if oracle.kind == "transfer":
        cov = oracle.covariances(psi_grid, psi_grid)
        return pinv_psd(cov.cov_x, rtol) @ cov.cov_cross
    gc = oracle.generator_covariances(psi_grid)
    return pinv_psd(gc.cov_x, rtol) @ gc.cov_xd


def representation_metrics(
    oracle: OperatorOracle,
    psi_grid: np.ndarray,
    psi_p_grid: np.ndarray | None = None,
    topk: int = 3,
    truncate_r: int = 3,
    rtol: float = DEFAULT_RTOL,
) -> dict:
    """Quality metrics of a representation against a transfer oracle.

    The spectral error compares eigenvalues of the operator compressed onto
    the span of ``psi_grid`` with the oracle spectrum; the optimality gap
    compares the rank-``truncate_r`` correlation score (computed with
    population quadrature covariances, using ``psi_p_grid`` on the evolved
    side) with the sum of the oracle's top squared singular values.
    """
    from .scores import whitened_singular_values

    cov = oracle.covariances(psi_grid, psi_p_grid)
    svals = whitened_singular_values(cov, rtol)
    p0 = float(np.sum(svals[:truncate_r] ** 2))
    gap = optimality_gap(p0, oracle.singular_values[:truncate_r] ** 2)
    tmat = compressed_operator(oracle, psi_grid, rtol)
    eigs = np.linalg.eigvals(tmat)
    eigs = eigs[eig_sort_order(eigs)]
    serr = spectral_error(eigs, oracle.eigenvalues, topk)
    return {
        "spectral_error": serr,
        "optimality_gap": gap,
        "p0_truncated": p0,
        "eigenvalues": eigs,
        "whitened_singular_values": svals,
    }


def generator_eigenvalue_errors(
    estimated, oracle: OperatorOracle, n_modes: int = 3
) -> np.ndarray:
    """Relative errors of the leading nonzero generator modes.

    ``estimated`` are eigenvalues sorted by descending real part with the
    stationary (near-zero) mode first; they are compared against the oracle
    eigenvalues lambda_2, ..., lambda_{n_modes+1}.
    """
    est = np.asarray(estimated, dtype=complex).ravel()
    if est.size < n_modes + 1:
        raise ValueError("not enough estimated eigenvalues")
    ref = np.asarray(oracle.eigenvalues[1 : n_modes + 1], dtype=complex)
    return np.abs(est[1 : n_modes + 1] - ref) / np.abs(ref)


# -- oracle serialization -----------------------------------------------------


def save_oracle(oracle: OperatorOracle, prefix) -> None:
    """Write ``<prefix>.json`` + ``<prefix>.bin`` (little-endian float64 blocks)."""
    prefix = Path(prefix)
    blocks = [
        ("grid", oracle.grid.astype("<f8")),
        ("weights", oracle.weights.astype("<f8")),
        ("matrix", oracle.matrix.astype("<f8")),
        ("singular_values", oracle.singular_values.astype("<f8")),
        ("eigenvalues_re", np.real(oracle.eigenvalues).astype("<f8")),
        ("eigenvalues_im", np.imag(oracle.eigenvalues).astype("<f8")),
    ]
    header = {
        "kind": oracle.kind,
        "grid_size": oracle.grid_size,
        "blocks": [{"name": n, "shape": list(b.shape)} for n, b in blocks],
    }
    prefix.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n")
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        for _, b in blocks:
            fh.write(np.ascontiguousarray(b).tobytes())


def load_oracle(prefix) -> OperatorOracle:
    prefix = Path(prefix)
    header = json.loads(prefix.with_suffix(".json").read_text())
    raw = np.frombuffer(prefix.with_suffix(".bin").read_bytes(), dtype="<f8")
    out = {}
    ofs = 0
    for blk in header["blocks"]:
        size = int(np.prod(blk["shape"]))
        out[blk["name"]] = raw[ofs : ofs + size].reshape(blk["shape"]).copy()
        ofs += size
    eigs = out["eigenvalues_re"] + 1j * out["eigenvalues_im"]
    if header["kind"] == "generator":
        eigs = eigs.real
    return OperatorOracle(
        kind=header["kind"],
        grid=out["grid"],
        weights=out["weights"],
        matrix=out["matrix"],
        _singular_values=out["singular_values"],
        _eigenvalues=eigs,
    )
