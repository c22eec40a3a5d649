"""Behavior-cloning loss, optimizers, and the training loop."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ConfigError, DimensionError, NumericError
from ..tree import TreeSpec
from .data import Dataset
from .policies import TreePolicy, UnstructuredPolicy

GRAD_CLIP_NORM = 100.0  # barrier terms can spike early in training

RMSPROP_RHO = 0.9
ADAM_BETAS = (0.9, 0.999)
OPT_EPS = 1e-8


def loss_mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DimensionError(f"loss_mse: shapes {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def grad_params(tree: TreeSpec | TreePolicy, batch: Dataset, params) -> tuple[float, np.ndarray]:
    """Mean batch loss and its gradient with respect to the weight parameters.

    The gradient is exact reverse-mode over the recorded forward pass; it
    contains the mixed second derivatives of the weight functions because
    their input-gradients are part of the forward computation.
    """
    if len(batch) == 0:
        raise ConfigError("grad_params: empty batch")
    policy = tree if isinstance(tree, TreePolicy) else TreePolicy(tree)
    params = np.asarray(params, dtype=float)
    if policy.n_params == 0:
        cache = policy.precompute(batch)
        return policy.loss_value(cache, slice(None), params), np.zeros(0)
    cache = policy.precompute(batch)
    return policy.loss_and_grad(cache, slice(None), params)


@dataclass
class OptState:
    """Parameters plus the optimizer's running moments."""

    kind: str  # rmsprop | adam
    params: np.ndarray
    v: np.ndarray
    m: np.ndarray | None = None
    t: int = 0


def init_opt(kind: str, params: np.ndarray) -> OptState:
    params = np.asarray(params, dtype=float)
    if kind == "rmsprop":
        return OptState(kind=kind, params=params.copy(), v=np.zeros_like(params))
    if kind == "adam":
        return OptState(
            kind=kind, params=params.copy(), v=np.zeros_like(params), m=np.zeros_like(params)
        )
    raise ConfigError(f"unknown optimizer {kind!r}")


def optimizer_step(kind: str, state: OptState, grad: np.ndarray, lr: float) -> OptState:
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.params.shape:
        raise DimensionError(
            f"gradient shape {grad.shape} != parameter shape {state.params.shape}"
        )
    if kind != state.kind:
        raise ConfigError(f"optimizer state is {state.kind!r}, step requested {kind!r}")
    if kind == "rmsprop":
        v = RMSPROP_RHO * state.v + (1.0 - RMSPROP_RHO) * grad * grad
        params = state.params - lr * grad / (np.sqrt(v) + OPT_EPS)
        new = OptState(kind=kind, params=params, v=v, t=state.t + 1)
    else:
        b1, b2 = ADAM_BETAS
        t = state.t + 1
        m = b1 * state.m + (1.0 - b1) * grad
        v = b2 * state.v + (1.0 - b2) * grad * grad
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        params = state.params - lr * m_hat / (np.sqrt(v_hat) + OPT_EPS)
        new = OptState(kind=kind, params=params, v=v, m=m, t=t)
    if not np.isfinite(new.params).all():
        raise NumericError("optimizer produced non-finite parameters")
    return new


@dataclass
class TrainConfig:
    optimizer: str = "rmsprop"
    learning_rate: float = 1e-3
    minibatch: int = 200
    iterations: int = 1000
    seed: int = 0
    checkpoint_every: int = 0  # 0 disables intermediate checkpoints

    def validate(self, n_records: int) -> None:
        if self.optimizer not in ("rmsprop", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.minibatch < 1 or self.minibatch > n_records:
            raise ConfigError(
                f"minibatch {self.minibatch} out of range for dataset of {n_records}"
            )
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")


@dataclass
class TrainResult:
    params: np.ndarray
    opt_state: OptState
    curve: list[tuple[int, float]]  # (iteration, minibatch loss)
    checkpoints: dict[int, np.ndarray] = field(default_factory=dict)


def _batch_indices(seed: int, iteration: int, n: int, size: int) -> np.ndarray:
    # keyed per iteration so a resumed run continues the identical stream
    rng = np.random.default_rng([seed, 1, iteration])
    return rng.choice(n, size=size, replace=False)


def train_bc(
    policy: TreeSpec | TreePolicy | UnstructuredPolicy,
    dataset: Dataset,
    config: TrainConfig,
    init: np.ndarray | None = None,
    opt_state: OptState | None = None,
    start_iteration: int = 0,
) -> TrainResult:
    """Clone the expert actions in the dataset by minibatch regression.

    Deterministic given (seed, config, dataset): initialization draws
    from one seeded stream, and the minibatch at iteration k is a pure
    function of (seed, k), so a run resumed from a checkpoint follows
    the uninterrupted schedule exactly.
    """
    if isinstance(policy, TreeSpec):
        policy = TreePolicy(policy)
    if len(dataset) == 0:
        raise ConfigError("train_bc: empty dataset")
    config.validate(len(dataset))

    if init is None:
        init = policy.init_params(np.random.default_rng([config.seed, 0]))
    params = np.asarray(init, dtype=float).copy()
    opt = opt_state if opt_state is not None else init_opt(config.optimizer, params)

    cache = policy.precompute(dataset)
    curve: list[tuple[int, float]] = []
    checkpoints: dict[int, np.ndarray] = {}
    n = len(dataset)
    for it in range(start_iteration, start_iteration + config.iterations):
        idx = _batch_indices(config.seed, it, n, config.minibatch)
        loss, grad = policy.loss_and_grad(cache, idx, opt.params)
        norm = float(np.linalg.norm(grad))
        if norm > GRAD_CLIP_NORM:
            grad = grad * (GRAD_CLIP_NORM / norm)
        opt = optimizer_step(config.optimizer, opt, grad, config.learning_rate)
        curve.append((it + 1, loss))
        if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            checkpoints[it + 1] = opt.params.copy()
    return TrainResult(params=opt.params.copy(), opt_state=opt, curve=curve, checkpoints=checkpoints)
