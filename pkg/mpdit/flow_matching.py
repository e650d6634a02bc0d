"""Flow-matching training.

The network regresses the velocity ``n - z`` of the straight path
``z_t = (1 - t) z + t n`` between a data latent z and Gaussian noise n,
with t ~ U[0, 1]. The loss is the mean squared error over batch and all
latent elements. Labels are replaced by the null class with probability
``label_drop_prob`` so the same network also learns the unconditional
field used for guidance.

The optimizer is AdamW (betas 0.9/0.999, eps 1e-8, no weight decay, fixed
learning rate) and an EMA shadow is updated after every step.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from mpdit.backbone import MpditConfig, MpditParams, Mpdit, init_mpdit
from mpdit.errors import ConfigError, DimensionError, NonFiniteError
from mpdit.dataset import Batch
from mpdit.layers import assert_same_structure, map_tensors, parameters, zero_grads
from mpdit.tensor import Rng, Tensor

logger = logging.getLogger(__name__)

T_DISTRIBUTIONS = ("uniform",)

Model = Callable[[Tensor, Any, np.ndarray], Tensor]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 128
    ema_decay: float = 0.9999
    label_drop_prob: float = 0.1
    t_distribution: str = "uniform"
    total_steps: int = 5000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    log_every: int = 10
    checkpoint_every: int = 1000

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError("train.learning_rate", f"must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", f"must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("train.ema_decay", f"must be in [0, 1], got {self.ema_decay}")
        if not 0.0 <= self.label_drop_prob < 1.0:
            raise ConfigError("train.label_drop_prob", f"must be in [0, 1), got {self.label_drop_prob}")
        if self.t_distribution not in T_DISTRIBUTIONS:
            raise ConfigError("train.t_distribution", f"must be one of {T_DISTRIBUTIONS}")
        if self.total_steps < 0:
            raise ConfigError("train.total_steps", f"must be >= 0, got {self.total_steps}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("train.beta1", "Adam betas must be in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("train.eps", f"must be > 0, got {self.eps}")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("train.log_every", "log and checkpoint intervals must be >= 1")


@dataclass
class AdamState:
    """First and second moments, aligned with ``parameters(params)`` order."""

    m: list[np.ndarray]
    v: list[np.ndarray]


@dataclass
class TrainState:
    params: MpditParams
    ema: MpditParams
    opt: AdamState
    step: int
    rng: Rng


@dataclass
class StepMetrics:
    step: int
    loss: float
    grad_norm: float


def init_train_state(model_cfg: MpditConfig, train_cfg: TrainConfig, dtype=np.float32) -> TrainState:
    """Fresh state at step 0; the EMA starts as a copy of the parameters."""
    train_cfg.validate()
    root = Rng(train_cfg.seed)
    params = init_mpdit(model_cfg, root.fork(0), dtype=dtype)
    leaves = parameters(params)
    return TrainState(
        params=params,
        ema=_shadow(params),
        opt=AdamState([np.zeros_like(p.data) for p in leaves], [np.zeros_like(p.data) for p in leaves]),
        step=0,
        rng=root.fork(1),
    )


def _shadow(params: MpditParams) -> MpditParams:
    return map_tensors(params, lambda t: Tensor(np.array(t.data)))


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def interpolate(z, n, t) -> Tensor:
    """``(1 - t) z + t n`` with t a scalar or one value per sample."""
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
    n = n if isinstance(n, Tensor) else Tensor(np.asarray(n, dtype=z.dtype))
    if z.shape != n.shape:
        raise DimensionError(f"interpolate endpoints differ in shape: {z.shape} vs {n.shape}")
    t_arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=z.dtype)
    if t_arr.ndim == 1:
        if t_arr.shape[0] != z.shape[0]:
            raise DimensionError(f"{t_arr.shape[0]} timesteps for a batch of {z.shape[0]}")
        t_arr = t_arr.reshape((-1,) + (1,) * (z.ndim - 1))
    elif t_arr.ndim != 0:
        raise DimensionError(f"t must be a scalar or (B,), got shape {t_arr.shape}")
    tt = Tensor(t_arr)
    return (1.0 - tt) * z + tt * n


def drop_labels(labels: np.ndarray, draws: np.ndarray, prob: float, null_class: int) -> np.ndarray:
    out = np.array(labels, dtype=np.int64)
    if prob > 0:
        out[draws < prob] = null_class
    return out


def fm_loss(
    model: Model,
    z,
    labels: np.ndarray,
    rng: Rng,
    *,
    label_drop_prob: float = 0.0,
    null_class: int | None = None,
) -> Tensor:
    """Mean squared error between ``model(z_t, t, c)`` and ``n - z``.

    Draws, in order: noise n, timesteps t, label-drop uniforms.
    """
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z))
    batch = z.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch,):
        raise DimensionError(f"{labels.shape} labels for a batch of {batch}")
    n = rng.normal(z.shape, dtype=z.dtype)
    t = rng.uniform((batch,), dtype=z.dtype)
    drops = rng.uniform((batch,), dtype=np.float64)
    if label_drop_prob > 0:
        if null_class is None:
            raise ConfigError("train.label_drop_prob", "label dropping needs a null class")
        labels = drop_labels(labels, drops, label_drop_prob, null_class)
    z_t = interpolate(z, n, t)
    target = Tensor(n) - z
    diff = model(z_t, Tensor(t), labels) - target
    return (diff * diff).mean()


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


def ema_update(ema: Any, params: Any, decay: float) -> Any:
    """In place: ``ema <- decay * ema + (1 - decay) * params``; returns ema."""
    if not 0.0 <= decay <= 1.0:
        raise ConfigError("train.ema_decay", f"must be in [0, 1], got {decay}")
    assert_same_structure(ema, params, "EMA and model parameters")
    for e, p in zip(parameters(ema), parameters(params)):
        e.data[...] = decay * e.data + (1.0 - decay) * p.data
    return ema


def adamw_update(leaves: list[Tensor], grads: list[np.ndarray], opt: AdamState, step: int, cfg: TrainConfig) -> None:
    lr, b1, b2 = cfg.learning_rate, cfg.beta1, cfg.beta2
    correction1 = 1.0 - b1**step
    correction2 = 1.0 - b2**step
    for p, g, m, v in zip(leaves, grads, opt.m, opt.v):
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * (g * g)
        update = (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data[...] = p.data - lr * update


def train_step(
    state: TrainState,
    batch: Batch,
    cfg: TrainConfig,
    model_cfg: MpditConfig,
) -> tuple[TrainState, StepMetrics]:
    """One optimisation step; mutates and returns ``state``."""
    step = state.step + 1
    zero_grads(state.params)
    model = Mpdit(model_cfg, state.params)
    try:
        loss = fm_loss(
            model,
            batch.latents,
            batch.labels,
            state.rng,
            label_drop_prob=cfg.label_drop_prob,
            null_class=model_cfg.num_classes,
        )
        loss.backward()
    except NonFiniteError as exc:
        raise NonFiniteError(exc.op, step=step) from exc

    leaves = parameters(state.params)
    grads = [p.grad.data if p.grad is not None else np.zeros_like(p.data) for p in leaves]
    grad_norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if not np.isfinite(grad_norm):
        raise NonFiniteError("gradients", step=step)

    adamw_update(leaves, grads, state.opt, step, cfg)
    zero_grads(state.params)
    ema_update(state.ema, state.params, cfg.ema_decay)
    state.step = step
    metrics = StepMetrics(step=step, loss=loss.item(), grad_norm=grad_norm)
    logger.debug("step %d loss %.6f grad_norm %.4f", step, metrics.loss, grad_norm)
    return state, metrics
