"""Reverse-time sampling with explicit Euler steps and classifier-free guidance.

The network approximates dz_t/dt = n - z, so sampling integrates from
t = 1 (noise) to t = 0 with ``z <- z - dt * v(z, t_k)`` at ``t_k = 1 - k/n``.
With guidance scale w != 1 every step also evaluates the null class and
combines ``v_u + w * (v_c - v_u)``; w == 1 evaluates the conditional branch
only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from tqdm import tqdm

from mpdit.errors import ConfigError, DimensionError, LabelError, NonFiniteError
from mpdit.flow_matching import Model
from mpdit.tensor import Rng, Tensor, no_grad

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SampleConfig:
    n_steps: int = 250
    cfg_scale: float = 1.0
    use_ema: bool = True
    seed: int = 0
    classes: tuple[int, ...] | None = None
    samples_per_class: int = 8
    batch_size: int = 64
    write_pgm: bool = True

    def validate(self) -> None:
        if self.n_steps < 1:
            raise ConfigError("sample.n_steps", f"must be >= 1, got {self.n_steps}")
        if self.cfg_scale < 0:
            raise ConfigError("sample.cfg_scale", f"must be >= 0, got {self.cfg_scale}")
        if self.samples_per_class < 0:
            raise ConfigError("sample.samples_per_class", f"must be >= 0, got {self.samples_per_class}")
        if self.batch_size < 1:
            raise ConfigError("sample.batch_size", f"must be >= 1, got {self.batch_size}")


def cfg_velocity(v_cond, v_uncond, w: float):
    """``v_uncond + w * (v_cond - v_uncond)``; w == 1 returns v_cond as is."""
    if np.shape(v_cond) != np.shape(v_uncond):
        raise DimensionError(f"guidance branches differ in shape: {np.shape(v_cond)} vs {np.shape(v_uncond)}")
    if w == 1.0:
        return v_cond
    if w == 0.0:
        return v_uncond
    return v_uncond + w * (v_cond - v_uncond)


def euler_sample(
    model: Model,
    labels: Sequence[int] | np.ndarray,
    sc: SampleConfig,
    *,
    latent: tuple[int, int, int] | None = None,
    noise: np.ndarray | None = None,
    null_class: int | None = None,
    progress: bool = False,
) -> np.ndarray:
    """Integrate from ``noise`` (or fresh noise from ``sc.seed``) to t = 0."""
    sc.validate()
    labels = np.asarray(labels, dtype=np.int64)
    if noise is None:
        if latent is None:
            raise DimensionError("euler_sample needs either noise or a latent shape")
        noise = Rng(sc.seed).normal((labels.shape[0], *latent))
    if noise.shape[0] != labels.shape[0]:
        raise DimensionError(f"{noise.shape[0]} noise latents for {labels.shape[0]} labels")
    guided = sc.cfg_scale != 1.0
    if guided:
        if null_class is None:
            null_class = getattr(model, "null_class", None)
        if null_class is None:
            raise ConfigError("sample.cfg_scale", "guidance needs a model with a null class")
        null_labels = np.full_like(labels, null_class)

    z = np.array(noise)
    n = sc.n_steps
    dt = 1.0 / n
    steps = tqdm(range(n), desc="euler", leave=False, disable=not progress)
    with no_grad():
        for k in steps:
            t = np.full(labels.shape[0], 1.0 - k / n, dtype=z.dtype)
            v = model(Tensor(z), t, labels).data
            if guided:
                v = cfg_velocity(v, model(Tensor(z), t, null_labels).data, sc.cfg_scale)
            z = z - dt * v
            if not np.isfinite(z).all():
                raise NonFiniteError("euler_sample", step=k)
    return z


@dataclass
class SampleGrid:
    latents: np.ndarray  # (K*S, h, w, d), class-major
    labels: np.ndarray  # (K*S,)
    classes: tuple[int, ...]
    per_class: int


def sample_grid(
    model: Model,
    classes: Sequence[int],
    sc: SampleConfig,
    latent: tuple[int, int, int],
    *,
    progress: bool = False,
) -> SampleGrid:
    """``sc.samples_per_class`` latents per class; sample j of class c starts from noise ``fork(c, j)``."""
    sc.validate()
    classes = tuple(int(c) for c in classes)
    per_class = sc.samples_per_class
    labels = np.repeat(np.asarray(classes, dtype=np.int64), per_class)
    if labels.size == 0:
        return SampleGrid(np.zeros((0, *latent), dtype=np.float32), labels, classes, per_class)
    root = Rng(sc.seed)
    noise = np.stack([root.fork(c, j).normal(latent) for c in classes for j in range(per_class)])
    out = []
    batches = range(0, labels.size, sc.batch_size)
    for start in tqdm(batches, desc="sampling", disable=not progress):
        stop = start + sc.batch_size
        out.append(euler_sample(model, labels[start:stop], sc, noise=noise[start:stop]))
    logger.info("sampled %d latents for %d classes", labels.size, len(classes))
    return SampleGrid(np.concatenate(out), labels, classes, per_class)


# ---------------------------------------------------------------------------
# Closed-form velocity for Gaussian class data
# ---------------------------------------------------------------------------


@dataclass
class GaussianOracleVelocity:
    """Optimal velocity when class c data is N(mu_c, sigma^2 I).

    With a = 1 - t, b = t and s^2 = a^2 sigma^2 + b^2:
    ``v*(x, t) = ((b - a sigma^2) / s^2) (x - a mu_c) - mu_c``.
    """

    means: np.ndarray  # (C, h, w, d)
    sigma: float

    @property
    def null_class(self) -> int:
        return self.means.shape[0]

    def __call__(self, z_t: Tensor, t, labels: np.ndarray) -> Tensor:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.means.shape[0]):
            raise LabelError("the Gaussian oracle has no unconditional branch")
        x = z_t.data.astype(np.float64)
        tt = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64).reshape(-1, 1, 1, 1)
        a, b = 1.0 - tt, tt
        s2 = a * a * self.sigma**2 + b * b
        mu = self.means[labels]
        v = ((b - a * self.sigma**2) / s2) * (x - a * mu) - mu
        return Tensor(v.astype(z_t.dtype))


def gaussian_oracle_velocity(means: np.ndarray, sigma: float) -> GaussianOracleVelocity:
    return GaussianOracleVelocity(np.asarray(means, dtype=np.float64), float(sigma))
