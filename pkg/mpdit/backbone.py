"""The MPDiT network.

A latent (B, h, w, d) is tokenized at the coarsest patch size and
processed by the first stage of DiT blocks together with m class tokens.
Each later stage starts with an upsample block that turns every coarse
token into a 2x2 group of finer tokens, adds the patch embedding of the
input at the finer patch size (the skip), and continues with that
stage's blocks. The time embedding is computed once and, in ``shared``
adaLN mode, one modulation 6-tuple feeds every block and the final layer.

A single-stage config ``[(2, N)]`` is a plain DiT.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from mpdit.conditioning import (
    FNO_BLOCK_COUNTS,
    FNO_WIDTHS,
    SINUSOIDAL_LINEAR_COUNTS,
    SPECTRAL_INITS,
    ClassEmbedTable,
    FnoTimeEmbedParams,
    PatchEmbedParams,
    SinusoidalTimeEmbedParams,
    class_token_batch,
    fno_time_embed,
    init_class_table,
    init_fno_time_embed,
    init_patch_embed,
    init_sinusoidal_time_embed,
    patch_embed,
    sinusoidal_time_embed,
)
from mpdit.errors import ConfigError, DimensionError
from mpdit.layers import LayerNormAffine, Linear, ParamFactory
from mpdit.tensor import Rng, Tensor, concat, gelu, matmul, silu, softmax_last_dim

logger = logging.getLogger(__name__)

TIME_EMBEDS = ("fno", "sinusoidal")
ADALN_MODES = ("shared", "per_block")
UPSAMPLE_VARIANTS = ("linear", "conv_transpose", "linear_linear", "linear_mlp", "linear_conv")

AttentionHook = Callable[[np.ndarray], None]
Modulation = tuple[Tensor, ...]


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MpditConfig:
    """Complete architectural description of one network."""

    stages: tuple[tuple[int, int], ...] = ((4, 6), (2, 6))
    hidden_size: int = 768
    num_heads: int = 12
    mlp_ratio: int = 4
    class_tokens: int = 16
    num_classes: int = 1000
    latent: tuple[int, int, int] = (32, 32, 4)
    time_embed: str = "fno"
    adaln: str = "shared"
    fno_width: int = 32
    fno_modes: int = 16
    fno_blocks: int = 3
    spectral_init: str = "randn"
    n_linear: int = 2
    freq_dim: int = 256
    upsample: str = "linear_linear"
    upsample_mlp_ratio: int = 4
    name: str = "custom"

    @property
    def depth(self) -> int:
        return sum(n for _, n in self.stages)

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def final_patch(self) -> int:
        return self.stages[-1][0]

    def image_tokens(self, patch_size: int) -> int:
        h, w, _ = self.latent
        return (h // patch_size) * (w // patch_size)

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError("model.stages", "at least one stage is required")
        for p, n in self.stages:
            if p < 1 or n < 1:
                raise ConfigError("model.stages", f"stage ({p}, {n}) needs patch size >= 1 and >= 1 block")
        for (p_coarse, _), (p_fine, _) in zip(self.stages, self.stages[1:]):
            if p_coarse != 2 * p_fine:
                raise ConfigError(
                    "model.stages", f"consecutive patch sizes must halve, got {p_coarse} -> {p_fine}"
                )
        if len(self.latent) != 3 or min(self.latent) < 1:
            raise ConfigError("model.latent", f"must be (h, w, d) of positive ints, got {self.latent}")
        h, w, _ = self.latent
        for p, _ in self.stages:
            if h % p or w % p:
                raise ConfigError("model.stages", f"patch size p={p} must divide latent h={h} and w={w}")
        if len(self.stages) > 1 and h != w:
            raise ConfigError("model.latent", f"multi-stage configs need a square latent, got h={h}, w={w}")
        if self.hidden_size < 4 or self.hidden_size % 4:
            raise ConfigError("model.hidden_size", f"must be a positive multiple of 4, got {self.hidden_size}")
        if self.num_heads < 1 or self.hidden_size % self.num_heads:
            raise ConfigError(
                "model.num_heads", f"{self.num_heads} heads do not divide hidden_size {self.hidden_size}"
            )
        if self.mlp_ratio < 1 or self.upsample_mlp_ratio < 1:
            raise ConfigError("model.mlp_ratio", "MLP ratios must be >= 1")
        if self.class_tokens < 1:
            raise ConfigError("model.class_tokens", f"must be >= 1, got {self.class_tokens}")
        if self.num_classes < 1:
            raise ConfigError("model.num_classes", f"must be >= 1, got {self.num_classes}")
        if self.time_embed not in TIME_EMBEDS:
            raise ConfigError("model.time_embed", f"must be one of {TIME_EMBEDS}, got {self.time_embed!r}")
        if self.adaln not in ADALN_MODES:
            raise ConfigError("model.adaln", f"must be one of {ADALN_MODES}, got {self.adaln!r}")
        if self.upsample not in UPSAMPLE_VARIANTS:
            raise ConfigError("model.upsample", f"must be one of {UPSAMPLE_VARIANTS}, got {self.upsample!r}")
        if self.time_embed == "fno":
            if self.fno_width == 128:
                logger.warning("FNO width 128 is known to train unstably; use 16, 32 or 64")
            if self.fno_width not in FNO_WIDTHS:
                raise ConfigError("model.fno_width", f"must be one of {FNO_WIDTHS}, got {self.fno_width}")
            if self.fno_blocks not in FNO_BLOCK_COUNTS:
                raise ConfigError("model.fno_blocks", f"must be one of {FNO_BLOCK_COUNTS}, got {self.fno_blocks}")
            if not 1 <= self.fno_modes <= 17:
                raise ConfigError("model.fno_modes", f"must be in [1, 17] for a 32-point grid, got {self.fno_modes}")
            if self.spectral_init not in SPECTRAL_INITS:
                raise ConfigError("model.spectral_init", f"must be one of {SPECTRAL_INITS}, got {self.spectral_init!r}")
        else:
            if self.n_linear not in SINUSOIDAL_LINEAR_COUNTS:
                raise ConfigError(
                    "model.n_linear", f"must be one of {SINUSOIDAL_LINEAR_COUNTS}, got {self.n_linear}"
                )
            if self.freq_dim < 2 or self.freq_dim % 2:
                raise ConfigError("model.freq_dim", f"must be a positive even number, got {self.freq_dim}")


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class TokenSequence:
    """(B, prefix + L, D) activations; the first ``prefix`` rows are class tokens."""

    tokens: Tensor
    prefix: int

    @property
    def image_count(self) -> int:
        return self.tokens.shape[1] - self.prefix

    def class_part(self) -> Tensor:
        return self.tokens[:, : self.prefix]

    def image_part(self) -> Tensor:
        return self.tokens[:, self.prefix :]


@dataclass
class BlockWeights:
    norm1: LayerNormAffine
    qkv: Linear
    proj: Linear
    norm2: LayerNormAffine
    fc1: Linear
    fc2: Linear
    adaln: Optional[Linear] = None


@dataclass
class UpsampleWeights:
    """Expansion D -> 4D, LayerNorm, and the variant's refine layers.

    ``conv_transpose`` keeps a (D,) bias shared by the four sub-positions.
    """

    expand: Linear
    norm: LayerNormAffine
    refine: list[Linear]
    variant: str = "linear_linear"


@dataclass
class FinalLayerWeights:
    norm: LayerNormAffine
    proj: Linear
    adaln: Optional[Linear] = None


@dataclass
class MpditParams:
    time_embed: Union[FnoTimeEmbedParams, SinusoidalTimeEmbedParams]
    class_table: ClassEmbedTable
    patch_embeds: list[PatchEmbedParams]
    stages: list[list[BlockWeights]]
    upsamples: list[UpsampleWeights]
    adaln: Optional[Linear]
    final: FinalLayerWeights


def init_mpdit(
    cfg: MpditConfig,
    rng: Rng | None = None,
    *,
    shape_only: bool = False,
    dtype=np.float32,
) -> MpditParams:
    """Build a parameter set for ``cfg``.

    adaLN linears and the final projection start at zero, so a fresh
    network maps every input to zero.
    """
    cfg.validate()
    f = ParamFactory(rng if rng is not None else Rng(0), np.dtype(dtype), shape_only)
    D = cfg.hidden_size
    if cfg.time_embed == "fno":
        time_embed = init_fno_time_embed(
            f,
            D,
            width=cfg.fno_width,
            modes=cfg.fno_modes,
            n_blocks=cfg.fno_blocks,
            spectral_init=cfg.spectral_init,
        )
    else:
        time_embed = init_sinusoidal_time_embed(f, D, n_linear=cfg.n_linear, freq_dim=cfg.freq_dim)
    per_block = cfg.adaln == "per_block"
    _, _, d = cfg.latent
    out_dim = cfg.final_patch * cfg.final_patch * d
    return MpditParams(
        time_embed=time_embed,
        class_table=init_class_table(f, cfg.num_classes, cfg.class_tokens, D),
        patch_embeds=[init_patch_embed(f, p, cfg.latent, D) for p, _ in cfg.stages],
        stages=[[_init_block(f, cfg, per_block) for _ in range(n)] for _, n in cfg.stages],
        upsamples=[_init_upsample(f, cfg) for _ in cfg.stages[1:]],
        adaln=None if per_block else f.linear(D, 6 * D, zero=True),
        final=FinalLayerWeights(
            norm=f.layer_norm(D),
            proj=f.linear(D, out_dim, zero=True),
            adaln=f.linear(D, 2 * D, zero=True) if per_block else None,
        ),
    )


def _init_block(f: ParamFactory, cfg: MpditConfig, per_block: bool) -> BlockWeights:
    D = cfg.hidden_size
    hidden = cfg.mlp_ratio * D
    return BlockWeights(
        norm1=f.layer_norm(D),
        qkv=f.linear(D, 3 * D),
        proj=f.linear(D, D),
        norm2=f.layer_norm(D),
        fc1=f.linear(D, hidden),
        fc2=f.linear(hidden, D),
        adaln=f.linear(D, 6 * D, zero=True) if per_block else None,
    )


def _init_upsample(f: ParamFactory, cfg: MpditConfig) -> UpsampleWeights:
    D = cfg.hidden_size
    variant = cfg.upsample
    if variant == "conv_transpose":
        expand = Linear(f.xavier(D, 4 * D), f.zeros(D))
    else:
        expand = f.linear(D, 4 * D)
    if variant in ("linear_linear", "linear_conv"):
        refine = [f.linear(D, D)]
    elif variant == "linear_mlp":
        hidden = cfg.upsample_mlp_ratio * D
        refine = [f.linear(D, hidden), f.linear(hidden, D)]
    else:
        refine = []
    return UpsampleWeights(expand=expand, norm=f.layer_norm(D), refine=refine, variant=variant)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


def modulate(y: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return y * (1.0 + scale) + shift


def split_modulation(mod: Tensor, parts: int) -> Modulation:
    """(B, parts*D) -> ``parts`` tensors of shape (B, 1, D)."""
    batch, width = mod.shape
    D = width // parts
    chunks = mod.reshape(batch, parts, D)
    return tuple(chunks[:, i : i + 1] for i in range(parts))


def attention(
    h: Tensor, qkv: Linear, proj: Linear, num_heads: int, on_attention: AttentionHook | None = None
) -> Tensor:
    """Full softmax self-attention over every token of the sequence."""
    batch, tokens, D = h.shape
    head_dim = D // num_heads
    heads = qkv(h).reshape(batch, tokens, 3, num_heads, head_dim).transpose(2, 0, 3, 1, 4)
    q, k, v = heads[0], heads[1], heads[2]
    scores = matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    weights = softmax_last_dim(scores)
    if on_attention is not None:
        on_attention(weights.data)
    out = matmul(weights, v).transpose(0, 2, 1, 3).reshape(batch, tokens, D)
    return proj(out)


def dit_block(
    x: TokenSequence,
    mod: Modulation,
    w: BlockWeights,
    num_heads: int,
    on_attention: AttentionHook | None = None,
) -> TokenSequence:
    if x.tokens.shape[-1] != w.qkv.in_features:
        raise DimensionError(f"block width {w.qkv.in_features} does not match tokens {x.tokens.shape}")
    shift1, scale1, gate1, shift2, scale2, gate2 = mod
    h = x.tokens
    h = h + gate1 * attention(modulate(w.norm1(h), shift1, scale1), w.qkv, w.proj, num_heads, on_attention)
    h = h + gate2 * w.fc2(gelu(w.fc1(modulate(w.norm2(h), shift2, scale2))))
    return TokenSequence(h, x.prefix)


def upsample_block(x: TokenSequence, w: UpsampleWeights) -> TokenSequence:
    """Quadruple the image tokens; coarse (i, j) chunk (a, b) lands at fine (2i+a, 2j+b)."""
    batch, _, D = x.tokens.shape
    count = x.image_count
    side = math.isqrt(count)
    if side * side != count:
        raise DimensionError(f"upsample needs a square image-token count, got {count}")
    img = x.image_part()
    if w.variant == "conv_transpose":
        y = matmul(img, w.expand.weight)
    else:
        y = w.expand(img)
    y = y.reshape(batch, side, side, 2, 2, D).transpose(0, 1, 3, 2, 4, 5).reshape(batch, 4 * count, D)
    if w.variant == "conv_transpose":
        y = y + w.expand.bias
    seq = w.norm(concat([x.class_part(), gelu(y)], axis=1))
    m = x.prefix
    if w.variant == "linear_linear":
        seq = w.refine[0](seq)
    elif w.variant == "linear_mlp":
        seq = w.refine[1](gelu(w.refine[0](seq)))
    elif w.variant == "linear_conv":
        seq = concat([seq[:, :m], w.refine[0](seq[:, m:])], axis=1)
    return TokenSequence(seq, m)


def unpatchify(tokens: Tensor, p: int, h: int, w: int) -> Tensor:
    """(B, L, p*p*d) -> (B, h, w, d); inverse of the patch flattening."""
    batch, count, width = tokens.shape
    gh, gw = h // p, w // p
    if count != gh * gw or width % (p * p):
        raise DimensionError(f"cannot unpatchify {tokens.shape} with p={p} into {h}x{w}")
    d = width // (p * p)
    x = tokens.reshape(batch, gh, gw, p, p, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(batch, h, w, d)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def embed_time(params: MpditParams, t: Tensor) -> Tensor:
    if isinstance(params.time_embed, FnoTimeEmbedParams):
        return fno_time_embed(t, params.time_embed)
    return sinusoidal_time_embed(t, params.time_embed)


def forward(
    params: MpditParams,
    cfg: MpditConfig,
    z_t: Tensor,
    t: Tensor | np.ndarray,
    labels: np.ndarray,
    on_attention: AttentionHook | None = None,
) -> Tensor:
    """Predict the velocity for a batch of noisy latents; output shape equals z_t."""
    if z_t.ndim != 4 or tuple(z_t.shape[1:]) != tuple(cfg.latent):
        raise DimensionError(f"expected latents of shape (B, {cfg.latent}), got {z_t.shape}")
    if not isinstance(t, Tensor):
        t = Tensor(np.asarray(t, dtype=z_t.dtype))
    m = cfg.class_tokens
    cond = silu(embed_time(params, t))
    shared = split_modulation(params.adaln(cond), 6) if params.adaln is not None else None

    cls = class_token_batch(labels, params.class_table)
    x = TokenSequence(concat([cls, patch_embed(z_t, params.patch_embeds[0])], axis=1), m)
    for i, blocks in enumerate(params.stages):
        if i > 0:
            x = upsample_block(x, params.upsamples[i - 1])
            skip = patch_embed(z_t, params.patch_embeds[i])
            x = TokenSequence(concat([x.class_part(), x.image_part() + skip], axis=1), m)
        for block in blocks:
            mod = shared if shared is not None else split_modulation(block.adaln(cond), 6)
            x = dit_block(x, mod, block, cfg.num_heads, on_attention)

    final = params.final
    if shared is not None:
        shift, scale = shared[0], shared[1]
    else:
        shift, scale = split_modulation(final.adaln(cond), 2)
    out = final.proj(modulate(final.norm(x.image_part()), shift, scale))
    h, w, _ = cfg.latent
    return unpatchify(out, cfg.final_patch, h, w)


@dataclass
class Mpdit:
    """A config bound to a parameter set; call it as ``model(z_t, t, labels)``."""

    cfg: MpditConfig
    params: MpditParams

    @classmethod
    def create(cls, cfg: MpditConfig, seed: int = 0, dtype=np.float32) -> Mpdit:
        return cls(cfg, init_mpdit(cfg, Rng(seed), dtype=dtype))

    @property
    def null_class(self) -> int:
        return self.cfg.num_classes

    def __call__(self, z_t: Tensor, t: Tensor | np.ndarray, labels: np.ndarray) -> Tensor:
        return forward(self.params, self.cfg, z_t, t, labels)
