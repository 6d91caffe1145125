"""Experiment configuration: strict JSON parsing into dataclasses.

Configs are plain JSON (no comments); unknown keys are rejected anywhere in
the document so typos fail fast, and all defaults are resolved at parse time
so the run manifest is self-describing.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

from .features import FeatureMapSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _take(doc: dict, known: dict, where: str) -> dict:
    """Merge ``doc`` over defaults ``known``, rejecting unknown keys."""
    extra = set(doc) - set(known)
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    merged = dict(known)
    merged.update(doc)
    return merged


@dataclass(frozen=True)
class SystemConfig:
    kind: str
    # logistic
    noise_order: int = 20
    # langevin
    potential: tuple[float, ...] = (1.0, 0.0, -2.0, 0.0, 1.0)
    beta: float = 1.0
    dt: float = 1e-3
    domain: tuple[float, float] = (-2.5, 2.5)
    lag_steps: int = 100
    # linear
    a: tuple[float, ...] = (0.7,)
    noise_std: float = 0.1
    # shared
    grid_size: int = 1024

    @classmethod
    def from_dict(cls, doc: dict) -> "SystemConfig":
        defaults = {
            "kind": None,
            "noise_order": 20,
            "potential": [1.0, 0.0, -2.0, 0.0, 1.0],
            "beta": 1.0,
            "dt": 1e-3,
            "domain": [-2.5, 2.5],
            "lag_steps": 100,
            "a": [0.7],
            "noise_std": 0.1,
            "grid_size": 1024,
        }
        merged = _take(doc, defaults, "system")
        if merged["kind"] not in ("logistic", "langevin", "linear"):
            raise ConfigError(f"unknown system kind {merged['kind']!r}")
        a = merged["a"]
        return cls(
            kind=merged["kind"],
            noise_order=int(merged["noise_order"]),
            potential=tuple(merged["potential"]),
            beta=float(merged["beta"]),
            dt=float(merged["dt"]),
            domain=tuple(merged["domain"]),
            lag_steps=int(merged["lag_steps"]),
            a=tuple(a) if isinstance(a, (list, tuple)) else (float(a),),
            noise_std=float(merged["noise_std"]),
            grid_size=int(merged["grid_size"]),
        )

    def build(self):
        from . import systems

        if self.kind == "logistic":
            return systems.LogisticMapSystem(
                noise_order=self.noise_order, grid_size=self.grid_size
            )
        if self.kind == "langevin":
            return systems.LangevinSystem(
                potential=self.potential,
                beta=self.beta,
                dt=self.dt,
                domain=self.domain,
                grid_size=self.grid_size,
            )
        return systems.LinearSystem(a=self.a, noise_std=self.noise_std)


@dataclass(frozen=True)
class DataConfig:
    n: int = 16384
    seed: int = 0
    burn_in: int | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "DataConfig":
        merged = _take(doc, {"n": 16384, "seed": 0, "burn_in": None}, "data")
        return cls(
            n=int(merged["n"]),
            seed=int(merged["seed"]),
            burn_in=None if merged["burn_in"] is None else int(merged["burn_in"]),
        )


@dataclass(frozen=True)
class EvaluationConfig:
    metrics: tuple[str, ...] = ("spectral_error", "optimality_gap", "timescales")
    topk: int = 3
    truncate_r: int = 3
    horizons: tuple[int, ...] = (1, 2, 5)

    @classmethod
    def from_dict(cls, doc: dict) -> "EvaluationConfig":
        defaults = {
            "metrics": ["spectral_error", "optimality_gap", "timescales"],
            "topk": 3,
            "truncate_r": 3,
            "horizons": [1, 2, 5],
        }
        merged = _take(doc, defaults, "evaluation")
        known_metrics = {"spectral_error", "optimality_gap", "timescales"}
        metrics = tuple(merged["metrics"])
        bad = set(metrics) - known_metrics
        if bad:
            raise ConfigError(f"unknown metrics: {sorted(bad)}")
        return cls(
            metrics=metrics,
            topk=int(merged["topk"]),
            truncate_r=int(merged["truncate_r"]),
            horizons=tuple(int(h) for h in merged["horizons"]),
        )


def _feature_spec_from_dict(doc: dict, where: str) -> FeatureMapSpec:
    defaults = {
        "input_dim": 1,
        "widths": None,
        "activations": None,
        "seed": 0,
        "use_bias": True,
    }
    merged = _take(doc, defaults, where)
    if merged["widths"] is None:
        raise ConfigError(f"{where}: widths are required")
    widths = tuple(int(w) for w in merged["widths"])
    acts = merged["activations"]
    if acts is None:
        raise ConfigError(f"{where}: activations are required")
    if isinstance(acts, str):
        acts = [acts] * (len(widths) - 1) + ["identity"]
    try:
        return FeatureMapSpec(
            input_dim=int(merged["input_dim"]),
            widths=widths,
            activations=tuple(acts),
            seed=int(merged["seed"]),
            use_bias=bool(merged["use_bias"]),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _train_config_from_dict(doc: dict) -> TrainConfig:
    defaults = {
        "score": "S",
        "gamma": 1.0,
        "ridge_reg": 1e-6,
        "batch_size": 256,
        "epochs": 100,
        "learning_rate": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps_opt": 1e-8,
        "seed": 0,
        "tied": False,
        "rtol": 1e-6,
        "early_stop": False,
        "patience": 20,
        "min_delta": 1e-5,
    }
    merged = _take(doc, defaults, "train")
    try:
        return TrainConfig(
            score=str(merged["score"]),
            gamma=float(merged["gamma"]),
            ridge_reg=float(merged["ridge_reg"]),
            batch_size=int(merged["batch_size"]),
            epochs=int(merged["epochs"]),
            learning_rate=float(merged["learning_rate"]),
            beta1=float(merged["beta1"]),
            beta2=float(merged["beta2"]),
            eps_opt=float(merged["eps_opt"]),
            seed=int(merged["seed"]),
            tied=bool(merged["tied"]),
            rtol=float(merged["rtol"]),
            early_stop=bool(merged["early_stop"]),
            patience=int(merged["patience"]),
            min_delta=float(merged["min_delta"]),
        )
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemConfig
    data: DataConfig
    features: FeatureMapSpec
    features_prime: FeatureMapSpec | None
    train: TrainConfig
    evaluation: EvaluationConfig | None
    seeds: tuple[int, ...] = (0,)
    out: str | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        defaults = {
            "system": None,
            "data": {},
            "features": None,
            "features_prime": None,
            "train": {},
            "evaluation": None,
            "seeds": [0],
            "out": None,
        }
        merged = _take(doc, defaults, "config")
        if merged["system"] is None:
            raise ConfigError("config: system section is required")
        if merged["features"] is None:
            raise ConfigError("config: features section is required")
        train = _train_config_from_dict(merged["train"])
        fprime = merged["features_prime"]
        if fprime is not None and train.tied:
            raise ConfigError("config: features_prime given but train.tied is true")
        return cls(
            system=SystemConfig.from_dict(merged["system"]),
            data=DataConfig.from_dict(merged["data"]),
            features=_feature_spec_from_dict(merged["features"], "features"),
            features_prime=(
                None if fprime is None else _feature_spec_from_dict(fprime, "features_prime")
            ),
            train=train,
            evaluation=(
                None
                if merged["evaluation"] is None
                else EvaluationConfig.from_dict(merged["evaluation"])
            ),
            seeds=tuple(int(s) for s in merged["seeds"]),
            out=merged["out"],
        )

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)

    def resolved_dict(self) -> dict:
        doc = asdict(self)
        doc["features"] = json.loads(self.features.to_json())
        doc["features_prime"] = (
            None if self.features_prime is None else json.loads(self.features_prime.to_json())
        )
        return doc

    def sha256(self) -> str:
        text = json.dumps(self.resolved_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()
