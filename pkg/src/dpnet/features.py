"""Parametric feature maps: small MLPs with explicit reverse-mode gradients.

A feature map sends states in R^d to features in R^r.  Forward evaluation
caches enough of the computation to (a) pull an upstream gradient with
respect to the feature matrix back to the flat parameter vector and (b)
propagate first and second spatial derivatives of every feature, which is
what the Ito-derivative of a feature needs.

Feature matrices follow the column convention: a batch of m states produces
an (r, m) array whose columns are the feature vectors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

_MAGIC = b"DPNFMAP1"
_FORMAT_VERSION = 1


class StaleHooksError(RuntimeError):
    """Parameters were updated after the hooks were captured."""


class UnsupportedActivationError(ValueError):
    """Operation needs a twice-differentiable activation."""


class _Identity:
    name = "identity"
    smooth = True

    @staticmethod
    def f(x):
        return x

    @staticmethod
    def d1(x):
        return np.ones_like(x)

    @staticmethod
    def d2(x):
        return np.zeros_like(x)

    @staticmethod
    def d3(x):
        return np.zeros_like(x)


class _LeakyRelu:
    # fixed slope 0.01; not twice differentiable, so no spatial derivatives
    name = "leaky_relu"
    smooth = False
    slope = 0.01

    @staticmethod
    def f(x):
        # max(x, slope*x) == leaky rectifier for 0 < slope < 1
        return np.maximum(x, _LeakyRelu.slope * x)

    @staticmethod
    def d1(x):
        return np.where(x > 0, 1.0, _LeakyRelu.slope)

    @staticmethod
    def d2(x):
        return np.zeros_like(x)

    @staticmethod
    def d3(x):
        return np.zeros_like(x)


class _Celu:
    # exponential-linear unit (alpha=1); C^1 everywhere, smooth away from 0
    name = "celu"
    smooth = True

    @staticmethod
    def f(x):
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))

    @staticmethod
    def d1(x):
        return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))

    @staticmethod
    def d2(x):
        return np.where(x > 0, 0.0, np.exp(np.minimum(x, 0.0)))

    @staticmethod
    def d3(x):
        return np.where(x > 0, 0.0, np.exp(np.minimum(x, 0.0)))


ACTIVATIONS = {a.name: a for a in (_Identity, _LeakyRelu, _Celu)}


@dataclass(frozen=True)
class FeatureMapSpec:
    """Architecture of a feature map.

    ``widths[k]`` is the output width of layer k (the last entry is the
    feature dimension r); ``activations[k]`` names the nonlinearity applied
    after layer k.  ``use_bias=False`` gives strictly linear layers, the
    right choice when the feature span must exclude constants.
    """

    input_dim: int
    widths: tuple[int, ...]
    activations: tuple[str, ...]
    seed: int = 0
    use_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.widths:
            raise ValueError("at least one layer is required")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if len(self.activations) != len(self.widths):
            raise ValueError("need one activation per layer")
        for name in self.activations:
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        ins = (self.input_dim,) + self.widths[:-1]
        return list(zip(ins, self.widths))

    @property
    def n_params(self) -> int:
        nb = 1 if self.use_bias else 0
        return sum(w_in * w_out + nb * w_out for w_in, w_out in self.layer_dims)

    @property
    def smooth(self) -> bool:
        return all(ACTIVATIONS[a].smooth for a in self.activations)

    def to_json(self) -> str:
        doc = {
            "input_dim": self.input_dim,
            "widths": list(self.widths),
            "activations": list(self.activations),
            "seed": self.seed,
        }
        if not self.use_bias:
            doc["use_bias"] = False
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "FeatureMapSpec":
        doc = json.loads(text)
        known = {"input_dim", "widths", "activations", "seed", "use_bias"}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown keys in feature-map spec: {sorted(extra)}")
        return cls(
            input_dim=int(doc["input_dim"]),
            widths=tuple(doc["widths"]),
            activations=tuple(doc["activations"]),
            seed=int(doc.get("seed", 0)),
            use_bias=bool(doc.get("use_bias", True)),
        )


class FeatureMap:
    """MLP feature map with a flat parameter vector.

    Parameter layout is the canonical layer order W1, b1, W2, b2, ... with
    each W stored row-major.  The map is immutable during forward/pullback;
    :meth:`update_params` replaces the vector and invalidates existing hooks.
    """

    def __init__(self, spec: FeatureMapSpec, params: np.ndarray):
        params = np.asarray(params, dtype=np.float64).ravel()
        if params.size != spec.n_params:
            raise ValueError(
                f"expected {spec.n_params} parameters, got {params.size}"
            )
        if not np.all(np.isfinite(params)):
            raise ValueError("parameters contain non-finite entries")
        self.spec = spec
        self._params = params.copy()
        self._version = 0

    # -- construction -------------------------------------------------

    @classmethod
    def init(cls, spec: FeatureMapSpec) -> "FeatureMap":
        """Deterministic initialisation: W ~ U(-s, s) with
        s = sqrt(6/(fan_in+fan_out)), biases zero."""
        rng = np.random.default_rng(spec.seed)
        chunks = []
        for w_in, w_out in spec.layer_dims:
            s = np.sqrt(6.0 / (w_in + w_out))
            chunks.append(rng.uniform(-s, s, size=w_in * w_out))
            if spec.use_bias:
                chunks.append(np.zeros(w_out))
        return cls(spec, np.concatenate(chunks))

    # -- parameters ----------------------------------------------------

    @property
    def params(self) -> np.ndarray:
        return self._params

    @property
    def version(self) -> int:
        return self._version

    @property
    def input_dim(self) -> int:
        return self.spec.input_dim

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim

    def update_params(self, params: np.ndarray) -> None:
        params = np.asarray(params, dtype=np.float64).ravel()
        if params.size != self.spec.n_params:
            raise ValueError("parameter count mismatch")
        self._params = params.copy()
        self._version += 1

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views (W, b) per layer into the flat parameter vector."""
        out = []
        ofs = 0
        for w_in, w_out in self.spec.layer_dims:
            w = self._params[ofs : ofs + w_in * w_out].reshape(w_out, w_in)
            ofs += w_in * w_out
            if self.spec.use_bias:
                b = self._params[ofs : ofs + w_out]
                ofs += w_out
            else:
                b = np.zeros(w_out)
            out.append((w, b))
        return out

    # -- evaluation ----------------------------------------------------

    def _coerce_batch(self, states) -> np.ndarray:
        x = np.asarray(states, dtype=np.float64)
        if x.ndim == 1:
            if self.input_dim == 1:
                x = x[:, None]
            else:
                x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(
                f"expected states of dimension {self.input_dim}, got shape {x.shape}"
            )
        return x

    def forward(self, states) -> tuple[np.ndarray, "FeatureHooks"]:
        """Evaluate the map on a batch of states (m, d) -> features (r, m)."""
        x = self._coerce_batch(states)
        a = x.T.copy()
        inputs, zs = [], []
        for (w, b), act_name in zip(self.layers(), self.spec.activations):
            act = ACTIVATIONS[act_name]
            inputs.append(a)
            z = w @ a + b[:, None]
            zs.append(z)
            a = act.f(z)
        hooks = FeatureHooks(fmap=self, version=self._version, inputs=inputs, zs=zs)
        return a, hooks

    def forward_spatial(
        self, states
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, "FeatureHooks"]:
        """Forward pass that also propagates spatial first/second derivatives.

        Returns (psi (r, m), grad (r, m, d), hess (r, m, d, d), hooks); the
        hooks support :meth:`FeatureHooks.pullback_spatial`.  Requires all
        activations twice differentiable.
        """
        if not self.spec.smooth:
            raise UnsupportedActivationError(
                "spatial derivatives need twice-differentiable activations"
            )
        x = self._coerce_batch(states)
        m, d = x.shape
        a = x.T.copy()
        u = np.zeros((d, m, d))
        u[np.arange(d), :, np.arange(d)] = 1.0
        v = np.zeros((d, m, d, d))
        inputs, zs, us_in, vs_in, uzs, vzs = [], [], [], [], [], []
        for (w, b), act_name in zip(self.layers(), self.spec.activations):
            act = ACTIVATIONS[act_name]
            inputs.append(a)
            us_in.append(u)
            vs_in.append(v)
            z = w @ a + b[:, None]
            uz = np.tensordot(w, u, axes=(1, 0))
            vz = np.tensordot(w, v, axes=(1, 0))
            zs.append(z)
            uzs.append(uz)
            vzs.append(vz)
            d1 = act.d1(z)
            d2 = act.d2(z)
            a = act.f(z)
            u = d1[:, :, None] * uz
            v = (
                d2[:, :, None, None] * uz[:, :, :, None] * uz[:, :, None, :]
                + d1[:, :, None, None] * vz
            )
        hooks = FeatureHooks(
            fmap=self,
            version=self._version,
            inputs=inputs,
            zs=zs,
            us_in=us_in,
            vs_in=vs_in,
            uzs=uzs,
            vzs=vzs,
        )
        return a, u, v, hooks

    def spatial_derivatives(
        self, x
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Features with gradient and Hessian at a single state.

        Returns (psi (r,), grad (r, d), hess (r, d, d)).
        """
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        if x.ndim != 1 or x.size != self.input_dim:
            raise ValueError(f"expected a single state of dimension {self.input_dim}")
        psi, grad, hess, _ = self.forward_spatial(x[None, :])
        return psi[:, 0], grad[:, 0, :], hess[:, 0, :, :]


@dataclass
class FeatureHooks:
    """Cached forward state for reverse-mode parameter gradients.

    Hooks are valid only while the owning map's parameters are unchanged;
    pulling back through stale hooks raises :class:`StaleHooksError`.
    """

    fmap: FeatureMap
    version: int
    inputs: list  # per-layer input activations (w_in, m)
    zs: list  # per-layer pre-activations (w_out, m)
    us_in: list | None = None
    vs_in: list | None = None
    uzs: list | None = None
    vzs: list | None = None
    _acts: tuple = field(init=False, default=())

    def __post_init__(self):
        self._acts = tuple(ACTIVATIONS[a] for a in self.fmap.spec.activations)

    def _check_fresh(self):
        if self.version != self.fmap.version:
            raise StaleHooksError("feature-map parameters changed after forward")

    def pullback(self, g: np.ndarray) -> np.ndarray:
        """Accumulate d(sum_ij G_ij Psi_ij)/dw for upstream gradient G (r, m)."""
        self._check_fresh()
        g = np.asarray(g, dtype=np.float64)
        if g.shape != self.zs[-1].shape:
            raise ValueError(f"upstream gradient shape {g.shape} does not match features")
        grad = np.zeros_like(self.fmap.params)
        layers = self.fmap.layers()
        delta = g
        ofs = self.fmap.params.size
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            act = self._acts[li]
            dz = delta * act.d1(self.zs[li])
            w_out, w_in = w.shape
            if self.fmap.spec.use_bias:
                ofs -= w_out
                grad[ofs : ofs + w_out] = dz.sum(axis=1)
            ofs -= w_in * w_out
            grad[ofs : ofs + w_in * w_out] = (dz @ self.inputs[li].T).ravel()
            if li > 0:
                delta = w.T @ dz
        return grad

    def pullback_spatial(
        self, ga: np.ndarray, gu: np.ndarray, gv: np.ndarray
    ) -> np.ndarray:
        """Reverse-mode through :meth:`FeatureMap.forward_spatial`.

        ``ga`` (r, m), ``gu`` (r, m, d) and ``gv`` (r, m, d, d) are upstream
        gradients with respect to the features, their spatial gradients and
        Hessians; the result is the flat parameter gradient.
        """
        self._check_fresh()
        if self.uzs is None:
            raise ValueError("hooks were not created by forward_spatial")
        ga = np.asarray(ga, dtype=np.float64)
        gu = np.asarray(gu, dtype=np.float64)
        gv = np.asarray(gv, dtype=np.float64)
        grad = np.zeros_like(self.fmap.params)
        layers = self.fmap.layers()
        ofs = self.fmap.params.size
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            act = self._acts[li]
            z, uz, vz = self.zs[li], self.uzs[li], self.vzs[li]
            d1, d2, d3 = act.d1(z), act.d2(z), act.d3(z)
            # v = d2 * uz (x) uz + d1 * vz ; u = d1 * uz ; a = f(z)
            outer = uz[:, :, :, None] * uz[:, :, None, :]
            gz = (
                ga * d1
                + d2 * np.einsum("kmp,kmp->km", gu, uz)
                + np.einsum(
                    "kmpq,kmpq->km",
                    gv,
                    d3[:, :, None, None] * outer + d2[:, :, None, None] * vz,
                )
            )
            gv_sym = gv + np.swapaxes(gv, 2, 3)
            guz = gu * d1[:, :, None] + d2[:, :, None] * np.einsum(
                "kmpq,kmq->kmp", gv_sym, uz
            )
            gvz = gv * d1[:, :, None, None]
            w_out, w_in = w.shape
            if self.fmap.spec.use_bias:
                ofs -= w_out
                grad[ofs : ofs + w_out] = gz.sum(axis=1)
            ofs -= w_in * w_out
            gw = (
                gz @ self.inputs[li].T
                + np.einsum("kmp,jmp->kj", guz, self.us_in[li])
                + np.einsum("kmpq,jmpq->kj", gvz, self.vs_in[li])
            )
            grad[ofs : ofs + w_in * w_out] = gw.ravel()
            if li > 0:
                ga = w.T @ gz
                gu = np.einsum("kj,kmp->jmp", w, guz)
                gv = np.einsum("kj,kmpq->jmpq", w, gvz)
        return grad


# -- serialization ------------------------------------------------------


def save_params(fmap: FeatureMap, path) -> None:
    """Binary checkpoint: 16-byte header (magic, version u32, count u32)
    followed by little-endian float64 parameters."""
    params = fmap.params.astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, params.size))
        fh.write(params.tobytes())


def load_params(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r} in {path}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        data = np.frombuffer(fh.read(8 * count), dtype="<f8")
        if data.size != count:
            raise ValueError("truncated checkpoint")
    return data.astype(np.float64)


def save_feature_map(fmap: FeatureMap, json_path, bin_path) -> None:
    with open(json_path, "w") as fh:
        fh.write(fmap.spec.to_json())
        fh.write("\n")
    save_params(fmap, bin_path)


def load_feature_map(json_path, bin_path) -> FeatureMap:
    with open(json_path) as fh:
        spec = FeatureMapSpec.from_json(fh.read())
    return FeatureMap(spec, load_params(bin_path))
