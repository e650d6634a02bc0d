"""Finite-difference gradient suite run by ``mpdit gradcheck``.

Every check runs in float64 on a copy of the network whose parameters are
jittered away from their initial values; zero-initialised gates and the
zero final projection would otherwise leave most gradients identically
zero.
"""

from __future__ import annotations

import logging
from typing import Callable

import numpy as np

from mpdit.backbone import MpditConfig, Mpdit, TokenSequence, dit_block, init_mpdit, split_modulation, upsample_block
from mpdit.conditioning import FnoTimeEmbedParams, fno_time_embed
from mpdit.flow_matching import fm_loss
from mpdit.layers import map_tensors, parameters
from mpdit.tensor import Rng, Tensor, grad_check, precision

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-3
PARAM_JITTER = 0.1
ROUNDOFF_ATOL = 1e-8


def jittered_params(cfg: MpditConfig, seed: int = 0, scale: float = PARAM_JITTER):
    """float64 parameters for ``cfg`` with ``N(0, scale)`` added to every entry."""
    rng = Rng(seed)
    with precision(np.float64):
        params = init_mpdit(cfg, rng.fork(0), dtype=np.float64)
        noise = rng.fork(1)
        return map_tensors(params, lambda t: Tensor(t.data + scale * noise.normal(t.shape, dtype=np.float64), True))


def _check(name: str, f: Callable, inputs: list[Tensor], max_coords: int | None) -> float:
    err = grad_check(f, inputs, max_coords=max_coords, atol=ROUNDOFF_ATOL)
    logger.info("gradcheck %-16s max rel err %.3e (%d tensors)", name, err, len(inputs))
    return err


def gradcheck_suite(
    cfg: MpditConfig,
    seed: int = 0,
    *,
    batch_size: int = 2,
    max_coords: int | None = 8,
    network_coords: int | None = None,
) -> dict[str, float]:
    """Max relative error per check: time embedding, first block, upsample, full loss.

    ``max_coords`` samples coordinates per tensor in the component checks;
    the full-loss check covers every parameter coordinate unless
    ``network_coords`` is given.
    """
    params = jittered_params(cfg, seed)
    data = Rng(seed).fork(2)
    results: dict[str, float] = {}
    with precision(np.float64):
        z = data.normal((batch_size, *cfg.latent), dtype=np.float64)
        labels = data.integers(0, cfg.num_classes, batch_size)
        t = Tensor(data.uniform((batch_size,), dtype=np.float64))

        if isinstance(params.time_embed, FnoTimeEmbedParams):
            tp = params.time_embed
            cotangent = Tensor(data.normal((batch_size, cfg.hidden_size), dtype=np.float64))
            results["fno_time_embed"] = _check(
                "fno_time_embed",
                lambda _: (fno_time_embed(t, tp) * cotangent).sum(),
                parameters(tp),
                max_coords,
            )

        D = cfg.hidden_size
        tokens = cfg.class_tokens + cfg.image_tokens(cfg.stages[0][0])
        x = TokenSequence(Tensor(data.normal((batch_size, tokens, D), dtype=np.float64)), cfg.class_tokens)
        cond = Tensor(data.normal((batch_size, 6 * D), dtype=np.float64), True)
        block = params.stages[0][0]
        block_cotangent = Tensor(data.normal((batch_size, tokens, D), dtype=np.float64))
        results["dit_block"] = _check(
            "dit_block",
            lambda _: (dit_block(x, split_modulation(cond, 6), block, cfg.num_heads).tokens * block_cotangent).sum(),
            [x.tokens, cond, *parameters(block)],
            max_coords,
        )

        if params.upsamples:
            up = params.upsamples[0]
            up_out = upsample_block(x, up).tokens
            up_cotangent = Tensor(data.normal(up_out.shape, dtype=np.float64))
            results["upsample_block"] = _check(
                "upsample_block",
                lambda _: (upsample_block(x, up).tokens * up_cotangent).sum(),
                [x.tokens, *parameters(up)],
                max_coords,
            )

        model = Mpdit(cfg, params)

        def loss(_):
            return fm_loss(model, z, labels, Rng(seed).fork(3))

        results["network"] = _check("network", loss, parameters(params), network_coords)
    return results
