"""Dataset containers and on-disk formats.

Paired datasets are stored either as CSV (header row, '.' decimal separator,
columns x, x_next and optionally lag; components suffixed for d > 1) or as a
little-endian float64 block with a JSON sidecar describing shapes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


def _as_state_array(a) -> np.ndarray:
    x = np.asarray(a, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"states must be (n, d), got shape {x.shape}")
    return x


@dataclass(frozen=True)
class PairedData:
    """Paired samples (x_i, x'_i); ``lags`` holds per-pair lag times when the
    pairs were drawn at non-uniform spacing."""

    x: np.ndarray  # (n, d)
    x_next: np.ndarray  # (n, d)
    lags: np.ndarray | None = None

    def __post_init__(self):
        x = _as_state_array(self.x)
        y = _as_state_array(self.x_next)
        if x.shape != y.shape:
            raise ValueError("x and x_next must have matching shapes")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "x_next", y)
        if self.lags is not None:
            lags = np.asarray(self.lags, dtype=np.float64).ravel()
            if lags.size != x.shape[0]:
                raise ValueError("lags must have one entry per pair")
            object.__setattr__(self, "lags", lags)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class GeneratorData:
    """State samples of an SDE with known drift and diffusion callables."""

    x: np.ndarray  # (n, d)
    drift: object
    diffusion: object

    def __post_init__(self):
        object.__setattr__(self, "x", _as_state_array(self.x))

    @property
    def n(self) -> int:
        return self.x.shape[0]


def save_pairs_csv(path, data: PairedData) -> None:
    d = data.dim
    if d == 1:
        cols = ["x", "x_next"]
        mat = np.hstack([data.x, data.x_next])
    else:
        cols = [f"x_{i}" for i in range(d)] + [f"x_next_{i}" for i in range(d)]
        mat = np.hstack([data.x, data.x_next])
    if data.lags is not None:
        cols.append("lag")
        mat = np.hstack([mat, data.lags[:, None]])
    header = ",".join(cols)
    np.savetxt(path, mat, delimiter=",", header=header, comments="", fmt="%.17g")


def load_pairs_csv(path) -> PairedData:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    mat = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    has_lag = header[-1] == "lag"
    lags = mat[:, -1] if has_lag else None
    body = mat[:, :-1] if has_lag else mat
    d = body.shape[1] // 2
    return PairedData(x=body[:, :d], x_next=body[:, d:], lags=lags)


def save_pairs_binary(path_bin, data: PairedData) -> None:
    path_bin = Path(path_bin)
    blocks = [data.x, data.x_next] + ([data.lags[:, None]] if data.lags is not None else [])
    with open(path_bin, "wb") as fh:
        for b in blocks:
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    sidecar = {
        "n": data.n,
        "dim": data.dim,
        "has_lags": data.lags is not None,
        "dtype": "<f8",
    }
    path_bin.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_pairs_binary(path_bin) -> PairedData:
    path_bin = Path(path_bin)
    sidecar = json.loads(path_bin.with_suffix(".json").read_text())
    n, d = sidecar["n"], sidecar["dim"]
    raw = np.frombuffer(path_bin.read_bytes(), dtype="<f8")
    x = raw[: n * d].reshape(n, d)
    y = raw[n * d : 2 * n * d].reshape(n, d)
    lags = raw[2 * n * d : 2 * n * d + n] if sidecar["has_lags"] else None
    return PairedData(x=x.copy(), x_next=y.copy(), lags=None if lags is None else lags.copy())
