"""Mini-batch score maximization with an adaptive-moment optimizer.

The loop is exactly: sample mini-batch -> covariances -> negated score as
loss -> pull the score gradient back through the feature map(s) -> optimizer
update.  Everything is deterministic given the seed; a non-finite loss
aborts with a diagnostic snapshot instead of raising.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import scores
from .data import GeneratorData, PairedData
from .features import FeatureMap
from .linalg import DEFAULT_RTOL, NotPSDError

SCORE_KINDS = ("P", "S", "ridge", "generator")

# numerical failures that abort a run instead of crashing it
_STEP_ERRORS = (np.linalg.LinAlgError, NotPSDError, scores.DegenerateBatchError)


@dataclass(frozen=True)
class TrainConfig:
    score: str = "S"
    gamma: float = 1.0
    ridge_reg: float = 1e-6  # ridge score only
    batch_size: int = 256
    epochs: int = 100
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    seed: int = 0
    tied: bool = False
    rtol: float = DEFAULT_RTOL
    early_stop: bool = False
    patience: int = 20
    min_delta: float = 1e-5

    def __post_init__(self):
        if self.score not in SCORE_KINDS:
            raise ValueError(f"score must be one of {SCORE_KINDS}, got {self.score!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        # zero is allowed as a degenerate dry-run rate; negative is not
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), t=0)


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps_opt: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected adaptive-moment update; returns new arrays."""
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = params - learning_rate * m_hat / (np.sqrt(v_hat) + eps_opt)
    return new, AdamState(m=m, v=v, t=t)


def minibatch_sampler(n: int, m: int, seed: int, epoch: int) -> np.ndarray:
    """Epoch-wise permutation without replacement, remainder dropped.

    Returns an (n // m, m) index array, deterministic per (seed, epoch).
    """
    if m > n:
        raise ValueError(f"batch size {m} exceeds dataset size {n}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))
    perm = rng.permutation(n)
    k = n // m
    return perm[: k * m].reshape(k, m)


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    value: scores.ScoreValue
    lr: float
    wall_ms: float


@dataclass
class TrainReport:
    config: TrainConfig
    steps: list[StepRecord] = field(default_factory=list)
    params: np.ndarray | None = None
    params_prime: np.ndarray | None = None  # None when maps are tied
    epoch_wall_s: list[float] = field(default_factory=list)
    aborted: bool = False
    abort_step: int | None = None
    abort_batch: np.ndarray | None = None
    abort_params: np.ndarray | None = None
    abort_message: str = ""
    stopped_early: bool = False

    @property
    def final_score(self) -> float:
        return self.steps[-1].value.total if self.steps else float("nan")

    def log_rows(self) -> list[tuple]:
        return [
            (rec.step, rec.epoch) + scores.csv_row(rec.value) + (rec.lr, rec.wall_ms)
            for rec in self.steps
        ]


LOG_HEADER = ("step", "epoch") + scores.CSV_HEADER + ("lr", "wall_ms")


def _discrete_step(fmap, fmap_p, xb, yb, config):
    psi, hooks = fmap.forward(xb)
    psi_p, hooks_p = fmap_p.forward(yb)
    if config.score == "S":
        value, g_psi, g_psi_p = scores.score_S_grad(psi, psi_p, config.gamma)
    elif config.score == "P":
        value, g_psi, g_psi_p = scores.score_P_grad(
            psi, psi_p, config.gamma, config.rtol
        )
    else:
        value, g_psi, g_psi_p = scores.score_ridge_grad(
            psi, psi_p, config.ridge_reg, config.gamma
        )
    # loss is the negated score
    grad = hooks.pullback(-g_psi)
    grad_p = hooks_p.pullback(-g_psi_p)
    return value, grad, grad_p


def _generator_step(fmap, data: GeneratorData, idx, config):
    xb = data.x[idx]
    psi, dpsi, hooks, a, sig = scores.ito_features(
        fmap, xb, data.drift, data.diffusion
    )
    value, g_psi, g_dpsi = scores.score_generator_grad(
        psi, dpsi, config.gamma, config.rtol
    )
    grad = scores.dpsi_pullback(hooks, -g_psi, -g_dpsi, a, sig)
    return value, grad


def _eval_score(fmap, fmap_p, data, config) -> float:
    if config.score == "generator":
        psi, dpsi, _, _, _ = scores.ito_features(
            fmap, data.x, data.drift, data.diffusion
        )
        return scores.score_generator(
            scores.generator_covariances(psi, dpsi), config.gamma, config.rtol
        ).total
    psi, _ = fmap.forward(data.x)
    psi_p, _ = fmap_p.forward(data.x_next)
    cov = scores.estimate_covariances(psi, psi_p)
    if config.score == "S":
        return scores.score_S(cov, config.gamma).total
    if config.score == "P":
        return scores.score_P(cov, config.gamma, config.rtol).total
    return scores.score_ridge(cov, config.ridge_reg, config.gamma).total


def train(
    data,
    fmap: FeatureMap,
    config: TrainConfig,
    fmap_prime: FeatureMap | None = None,
    val_data=None,
) -> TrainReport:
    """Run the mini-batch training loop and return the full report.

    For discrete scores ``data`` is :class:`PairedData` and two maps are
    optimized (or one when ``config.tied``); the generator score takes
    :class:`GeneratorData` and a single map.
    """
    report = TrainReport(config=config)
    is_generator = config.score == "generator"
    if is_generator:
        if not isinstance(data, GeneratorData):
            raise TypeError("generator score needs GeneratorData")
        fmap_p = None
    else:
        if not isinstance(data, PairedData):
            raise TypeError(f"score {config.score!r} needs PairedData")
        if config.tied:
            fmap_p = fmap
        else:
            if fmap_prime is None:
                raise ValueError("untied training needs a second feature map")
            if fmap_prime is fmap:
                raise ValueError("untied maps must be distinct objects")
            fmap_p = fmap_prime
        if data.x.shape[1] != fmap.input_dim:
            raise ValueError("state dimension does not match the feature map")
    n = data.n
    if n < config.batch_size:
        raise ValueError("dataset smaller than one batch")

    tied = is_generator or fmap_p is fmap
    opt = AdamState.zeros(
        fmap.params.size + (0 if tied else fmap_p.params.size)
    )
    best_val = -np.inf
    stale_evals = 0
    step = 0
    for epoch in range(config.epochs):
        t_epoch = time.perf_counter()
        for idx in minibatch_sampler(n, config.batch_size, config.seed, epoch):
            t0 = time.perf_counter()
            failure = None
            try:
                # overflow is a detected failure mode, not a warning
                with np.errstate(over="ignore", invalid="ignore"):
                    if is_generator:
                        value, grad = _generator_step(fmap, data, idx, config)
                    else:
                        xb, yb = data.x[idx], data.x_next[idx]
                        value, g1, g2 = _discrete_step(fmap, fmap_p, xb, yb, config)
                        grad = g1 + g2 if tied else np.concatenate([g1, g2])
            except _STEP_ERRORS as exc:
                failure = f"{type(exc).__name__}: {exc}"
            if failure is None and not (
                np.isfinite(value.total) and np.all(np.isfinite(grad))
            ):
                failure = (
                    f"non-finite loss/gradient (score={value.total!r}, "
                    f"cond_x={value.cond_x:.3e})"
                )
            if failure is not None:
                report.aborted = True
                report.abort_step = step
                report.abort_batch = idx.copy()
                report.abort_params = (
                    fmap.params.copy()
                    if tied
                    else np.concatenate([fmap.params, fmap_p.params])
                )
                report.abort_message = f"step {step}: {failure}"
                report.params = fmap.params.copy()
                report.params_prime = None if tied else fmap_p.params.copy()
                return report
            packed = (
                fmap.params if tied else np.concatenate([fmap.params, fmap_p.params])
            )
            packed, opt = adam_step(
                packed,
                grad,
                opt,
                config.learning_rate,
                config.beta1,
                config.beta2,
                config.eps_opt,
            )
            if tied:
                fmap.update_params(packed)
            else:
                k = fmap.params.size
                fmap.update_params(packed[:k])
                fmap_p.update_params(packed[k:])
            wall_ms = (time.perf_counter() - t0) * 1e3
            report.steps.append(
                StepRecord(step=step, epoch=epoch, value=value, lr=config.learning_rate, wall_ms=wall_ms)
            )
            step += 1
        report.epoch_wall_s.append(time.perf_counter() - t_epoch)
        if config.early_stop and val_data is not None:
            val = _eval_score(fmap, fmap_p, val_data, config)
            if val > best_val + config.min_delta:
                best_val = val
                stale_evals = 0
            else:
                stale_evals += 1
                if stale_evals >= config.patience:
                    report.stopped_early = True
                    break
    report.params = fmap.params.copy()
    report.params_prime = None if tied else fmap_p.params.copy()
    return report
