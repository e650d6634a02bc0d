"""TrainState <-> tensor container.

Tensor names:
    param/<path>   model parameters
    ema/<path>     EMA shadow
    adam_m/<path>  first moments
    adam_v/<path>  second moments
    state/step     step counter
    state/rng      RNG seed and counter

Integers are stored as 16-bit limbs in float32 (exactly representable), so
the container only ever holds 32-bit scalars.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path

import numpy as np

from harness.config import RunConfig, canonical_text, compatibility_view, parse_run_config_text
from harness.container import load_tensors, save_tensors
from mpdit.errors import CheckpointMismatchError, ContainerError
from mpdit.flow_matching import AdamState, TrainState, init_train_state
from mpdit.layers import named_parameters
from mpdit.tensor import Rng

logger = logging.getLogger(__name__)

_LIMBS = 4
_LIMB = 1 << 16


def int_to_limbs(value: int) -> np.ndarray:
    value = int(value)
    if not 0 <= value < 1 << (16 * _LIMBS):
        raise ValueError(f"{value} does not fit in {_LIMBS} 16-bit limbs")
    return np.array([(value >> (16 * i)) & (_LIMB - 1) for i in range(_LIMBS)], dtype=np.float32)


def limbs_to_int(limbs: np.ndarray) -> int:
    return sum(int(limb) << (16 * i) for i, limb in enumerate(np.asarray(limbs).reshape(-1)))


def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    params = named_parameters(state.params)
    for name, t in params:
        tensors[f"param/{name}"] = t.data
    for name, t in named_parameters(state.ema):
        tensors[f"ema/{name}"] = t.data
    for (name, _), m in zip(params, state.opt.m):
        tensors[f"adam_m/{name}"] = m
    for (name, _), v in zip(params, state.opt.v):
        tensors[f"adam_v/{name}"] = v
    tensors["state/step"] = int_to_limbs(state.step)
    seed, counter = state.rng.state()
    tensors["state/rng"] = np.concatenate([int_to_limbs(seed), int_to_limbs(counter)])
    return tensors


def save_checkpoint(path: str | os.PathLike, state: TrainState, run_cfg: RunConfig) -> Path:
    out = save_tensors(path, state_tensors(state), canonical_text(run_cfg))
    logger.info("checkpoint step %d -> %s", state.step, out)
    return out


def check_compatible(saved: RunConfig, current: RunConfig) -> None:
    left, right = compatibility_view(saved), compatibility_view(current)
    mismatched = sorted(k for k in set(left) | set(right) if left.get(k) != right.get(k))
    if mismatched:
        raise CheckpointMismatchError(mismatched)


def load_checkpoint(path: str | os.PathLike, run_cfg: RunConfig) -> TrainState:
    """Rebuild the TrainState saved at ``path``; the run config must be compatible."""
    payload = load_tensors(path)
    saved = parse_run_config_text(payload.config_text, source=str(path))
    check_compatible(saved, run_cfg)

    state = init_train_state(run_cfg.model, run_cfg.train)
    tensors = payload.tensors
    params = named_parameters(state.params)

    def fetch(name: str, like: np.ndarray) -> np.ndarray:
        if name not in tensors:
            raise ContainerError(f"checkpoint is missing tensor {name!r}")
        data = tensors[name]
        if data.shape != like.shape:
            raise CheckpointMismatchError([f"{name} shape {data.shape} != {like.shape}"])
        return data

    for name, t in params:
        t.data[...] = fetch(f"param/{name}", t.data)
    for name, t in named_parameters(state.ema):
        t.data[...] = fetch(f"ema/{name}", t.data)
    state.opt = AdamState(
        m=[np.array(fetch(f"adam_m/{name}", t.data)) for name, t in params],
        v=[np.array(fetch(f"adam_v/{name}", t.data)) for name, t in params],
    )
    state.step = limbs_to_int(fetch("state/step", np.zeros(_LIMBS)))
    rng_limbs = fetch("state/rng", np.zeros(2 * _LIMBS))
    state.rng = Rng(limbs_to_int(rng_limbs[:_LIMBS]), limbs_to_int(rng_limbs[_LIMBS:]))
    logger.info("resumed from %s at step %d", path, state.step)
    return state
