"""Conditioning and tokenization front-ends.

- FNO time embedding: a 32-point grid on [-1, 1] shifted by t, lifted to
  ``width`` channels, passed through MixedFNO blocks (spectral conv plus a
  1x1 local conv, GELU between blocks), mean-pooled and projected to D.
- Sinusoidal time embedding: interleaved sin/cos features followed by a
  small SiLU MLP (the baseline the FNO embedder replaces).
- Multi-token class embedding: one table row of length m*D reshaped into
  m tokens. Row C is the learned null class used for guidance.
- Patch embedding: non-overlapping p x p patches, projected to D, plus a
  fixed 2D sin/cos positional table. Class tokens get no position.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field

import numpy as np

from mpdit.errors import ConfigError, DimensionError, LabelError
from mpdit.layers import Linear, ParamFactory
from mpdit.tensor import ComplexSpectrum, Tensor, concat, dft_real, gelu, idft_real, matmul, silu

logger = logging.getLogger(__name__)

FNO_GRID_LEN = 32
FNO_WIDTHS = (16, 32, 64)
FNO_BLOCK_COUNTS = (2, 3, 4)
SPECTRAL_INITS = ("randn", "scaled")
SINUSOIDAL_LINEAR_COUNTS = (1, 2, 3)
SINUSOIDAL_FREQ_DIM = 256
SINUSOIDAL_TIME_SCALE = 1000.0
SINUSOIDAL_MAX_PERIOD = 10000.0
CLASS_TABLE_STD = 0.02


# ---------------------------------------------------------------------------
# Spectral convolution
# ---------------------------------------------------------------------------


@dataclass
class SpectralConvWeights:
    """Complex weights for the first ``modes`` bins, shape (in, out, modes)."""

    real: Tensor
    imag: Tensor

    @property
    def in_channels(self) -> int:
        return self.real.shape[0]

    @property
    def out_channels(self) -> int:
        return self.real.shape[1]

    @property
    def modes(self) -> int:
        return self.real.shape[2]


def spectral_conv_1d(x: Tensor, w: SpectralConvWeights) -> Tensor:
    """(B, W_in, G) -> (B, W_out, G): filter the first ``modes`` Fourier bins.

    The transform runs in float64 and the result is cast back to x's dtype.
    """
    if w.real.shape != w.imag.shape or w.real.ndim != 3:
        raise DimensionError(
            f"spectral weights must share an (in, out, modes) shape, got {w.real.shape} and {w.imag.shape}"
        )
    if x.ndim != 3 or x.shape[1] != w.in_channels:
        raise DimensionError(f"spectral_conv_1d expects (B, {w.in_channels}, G), got {x.shape}")
    batch, _, length = x.shape
    bins = length // 2 + 1
    modes = w.modes
    if modes > bins:
        raise ConfigError("model.fno_modes", f"{modes} modes exceed the {bins} bins of a length-{length} grid")

    spectrum = dft_real(x)
    # (B, i, k) -> (k, B, i) against (i, o, k) -> (k, i, o); one matmul per mode.
    xr = spectrum.real[:, :, :modes].transpose(2, 0, 1)
    xi = spectrum.imag[:, :, :modes].transpose(2, 0, 1)
    wr = w.real.astype(np.float64).transpose(2, 0, 1)
    wi = w.imag.astype(np.float64).transpose(2, 0, 1)
    out_r = (matmul(xr, wr) - matmul(xi, wi)).transpose(1, 2, 0)
    out_i = (matmul(xr, wi) + matmul(xi, wr)).transpose(1, 2, 0)
    if modes < bins:
        pad = Tensor(np.zeros((batch, w.out_channels, bins - modes), dtype=np.float64))
        out_r = concat([out_r, pad], axis=2)
        out_i = concat([out_i, pad], axis=2)
    y = idft_real(ComplexSpectrum(out_r, out_i, length), length)
    return y.astype(x.dtype)


# ---------------------------------------------------------------------------
# FNO time embedding
# ---------------------------------------------------------------------------


@dataclass
class MixedFnoBlock:
    spectral: SpectralConvWeights
    local: Linear
    activate: bool = True

    def __call__(self, x: Tensor) -> Tensor:
        # local is a 1x1 conv over the grid: apply the linear on (B, G, W).
        local = self.local(x.transpose(0, 2, 1)).transpose(0, 2, 1)
        y = spectral_conv_1d(x, self.spectral) + local
        return gelu(y) if self.activate else y


@dataclass
class FnoTimeEmbedParams:
    lift: Linear
    blocks: list[MixedFnoBlock]
    pool_proj: Linear
    grid_len: int = FNO_GRID_LEN

    @property
    def width(self) -> int:
        return self.lift.out_features

    @property
    def modes(self) -> int:
        return self.blocks[0].spectral.modes


def init_fno_time_embed(
    factory: ParamFactory,
    hidden_size: int,
    *,
    width: int = 32,
    modes: int = 16,
    n_blocks: int = 3,
    grid_len: int = FNO_GRID_LEN,
    spectral_init: str = "randn",
) -> FnoTimeEmbedParams:
    if n_blocks not in FNO_BLOCK_COUNTS:
        raise ConfigError("model.fno_blocks", f"must be one of {FNO_BLOCK_COUNTS}, got {n_blocks}")
    if modes < 1 or modes > grid_len // 2 + 1:
        raise ConfigError("model.fno_modes", f"must be in [1, {grid_len // 2 + 1}], got {modes}")
    if spectral_init not in SPECTRAL_INITS:
        raise ConfigError("model.spectral_init", f"must be one of {SPECTRAL_INITS}, got {spectral_init!r}")
    std = 1.0 if spectral_init == "randn" else 1.0 / (width * modes)
    blocks = [
        MixedFnoBlock(
            spectral=SpectralConvWeights(
                factory.normal(width, width, modes, std=std),
                factory.normal(width, width, modes, std=std),
            ),
            local=factory.linear(width, width),
            activate=i < n_blocks - 1,
        )
        for i in range(n_blocks)
    ]
    return FnoTimeEmbedParams(
        lift=factory.linear(1, width),
        blocks=blocks,
        pool_proj=factory.linear(width, hidden_size),
        grid_len=grid_len,
    )


def fno_time_embed(t: Tensor, p: FnoTimeEmbedParams) -> Tensor:
    """(B,) timesteps -> (B, D) embeddings."""
    if t.ndim != 1:
        raise DimensionError(f"fno_time_embed expects t of shape (B,), got {t.shape}")
    if logger.isEnabledFor(logging.DEBUG) and ((t.data < 0).any() or (t.data > 1).any()):
        logger.debug("timesteps outside [0, 1]: min=%.4f max=%.4f", t.data.min(), t.data.max())
    batch = t.shape[0]
    grid = Tensor(np.linspace(-1.0, 1.0, p.grid_len).astype(t.dtype))
    signal = t.reshape(batch, 1) + grid
    h = p.lift(signal.reshape(batch, p.grid_len, 1)).transpose(0, 2, 1)
    for block in p.blocks:
        h = block(h)
    return p.pool_proj(h.mean(axis=2))


# ---------------------------------------------------------------------------
# Sinusoidal time embedding
# ---------------------------------------------------------------------------


@dataclass
class SinusoidalTimeEmbedParams:
    layers: list[Linear]
    freq_dim: int = SINUSOIDAL_FREQ_DIM
    time_scale: float = SINUSOIDAL_TIME_SCALE


def init_sinusoidal_time_embed(
    factory: ParamFactory,
    hidden_size: int,
    *,
    n_linear: int = 2,
    freq_dim: int = SINUSOIDAL_FREQ_DIM,
) -> SinusoidalTimeEmbedParams:
    if n_linear not in SINUSOIDAL_LINEAR_COUNTS:
        raise ConfigError("model.n_linear", f"must be one of {SINUSOIDAL_LINEAR_COUNTS}, got {n_linear}")
    if freq_dim % 2:
        raise ConfigError("model.freq_dim", f"must be even, got {freq_dim}")
    dims = [freq_dim] + [hidden_size] * n_linear
    layers = [factory.normal_linear(a, b) for a, b in zip(dims[:-1], dims[1:])]
    return SinusoidalTimeEmbedParams(layers=layers, freq_dim=freq_dim)


def sinusoidal_features(t: Tensor, freq_dim: int, time_scale: float = SINUSOIDAL_TIME_SCALE) -> Tensor:
    """Interleaved ``[sin(a_0), cos(a_0), sin(a_1), ...]`` with log-spaced frequencies."""
    batch = t.shape[0]
    half = freq_dim // 2
    freqs = np.exp(-np.log(SINUSOIDAL_MAX_PERIOD) * np.arange(half) / half) * time_scale
    args = t.reshape(batch, 1) * Tensor(freqs.astype(t.dtype))
    pairs = concat([args.sin().reshape(batch, half, 1), args.cos().reshape(batch, half, 1)], axis=2)
    return pairs.reshape(batch, freq_dim)


def sinusoidal_time_embed(t: Tensor, p: SinusoidalTimeEmbedParams) -> Tensor:
    if t.ndim != 1:
        raise DimensionError(f"sinusoidal_time_embed expects t of shape (B,), got {t.shape}")
    h = sinusoidal_features(t, p.freq_dim, p.time_scale)
    for i, layer in enumerate(p.layers):
        h = layer(h)
        if i < len(p.layers) - 1:
            h = silu(h)
    return h


# ---------------------------------------------------------------------------
# Multi-token class embedding
# ---------------------------------------------------------------------------


@dataclass
class ClassEmbedTable:
    """(C+1, m*D) table; row c reshapes to m tokens, row C is the null class."""

    table: Tensor
    tokens: int

    @property
    def num_classes(self) -> int:
        return self.table.shape[0] - 1

    @property
    def null_class(self) -> int:
        return self.num_classes

    @property
    def width(self) -> int:
        return self.table.shape[1] // self.tokens


def init_class_table(factory: ParamFactory, num_classes: int, tokens: int, hidden_size: int) -> ClassEmbedTable:
    return ClassEmbedTable(
        table=factory.normal(num_classes + 1, tokens * hidden_size, std=CLASS_TABLE_STD),
        tokens=tokens,
    )


def class_tokens(c: int, tbl: ClassEmbedTable) -> Tensor:
    """Tokens for one class index (``c == C`` selects the null row) as (m, D)."""
    if not 0 <= int(c) <= tbl.num_classes:
        raise LabelError(f"class index {c} outside [0, {tbl.num_classes}]")
    return tbl.table[int(c)].reshape(tbl.tokens, tbl.width)


def class_token_batch(labels: np.ndarray, tbl: ClassEmbedTable) -> Tensor:
    """Tokens for a batch of class indices as (B, m, D)."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"labels must be a 1-D integer array, got {labels.dtype} {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > tbl.num_classes):
        raise LabelError(f"class indices {labels.min()}..{labels.max()} outside [0, {tbl.num_classes}]")
    return tbl.table[labels].reshape(labels.shape[0], tbl.tokens, tbl.width)


# ---------------------------------------------------------------------------
# Patch embedding
# ---------------------------------------------------------------------------


@dataclass
class PatchEmbedParams:
    patch_size: int
    proj: Linear
    grid: tuple[int, int] = field(default=(1, 1))

    @property
    def pos_encoding(self) -> np.ndarray:
        return sincos_2d(self.grid[0], self.grid[1], self.proj.out_features)


def init_patch_embed(
    factory: ParamFactory, patch_size: int, latent: tuple[int, int, int], hidden_size: int
) -> PatchEmbedParams:
    h, w, d = latent
    _check_divisible(h, w, patch_size)
    return PatchEmbedParams(
        patch_size=patch_size,
        proj=factory.linear(patch_size * patch_size * d, hidden_size),
        grid=(h // patch_size, w // patch_size),
    )


@functools.lru_cache(maxsize=16)
def sincos_2d(grid_h: int, grid_w: int, dim: int) -> np.ndarray:
    """Fixed (grid_h*grid_w, dim) table: first half encodes the row, second half the column."""
    if dim % 4:
        raise ConfigError("model.hidden_size", f"must be divisible by 4 for 2D positional encoding, got {dim}")
    omega = 1.0 / 10000.0 ** (np.arange(dim // 4, dtype=np.float64) / (dim / 4.0))
    rows, cols = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")

    def encode(pos: np.ndarray) -> np.ndarray:
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    table = np.concatenate([encode(rows), encode(cols)], axis=1)
    table.flags.writeable = False
    return table


def _check_divisible(h: int, w: int, p: int) -> None:
    if p < 1 or h % p or w % p:
        raise ConfigError("model.stages", f"patch size p={p} must divide latent h={h} and w={w}")


def patchify(z: Tensor, p: int) -> Tensor:
    """(B, h, w, d) -> (B, L, p*p*d); patches row-major, (row, col, channel) within a patch."""
    batch, h, w, d = z.shape
    _check_divisible(h, w, p)
    x = z.reshape(batch, h // p, p, w // p, p, d).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(batch, (h // p) * (w // p), p * p * d)


def patch_embed(z: Tensor, p: PatchEmbedParams) -> Tensor:
    if z.ndim != 4:
        raise DimensionError(f"patch_embed expects (B, h, w, d), got {z.shape}")
    _, h, w, _ = z.shape
    _check_divisible(h, w, p.patch_size)
    tokens = p.proj(patchify(z, p.patch_size))
    pos = sincos_2d(h // p.patch_size, w // p.patch_size, p.proj.out_features)
    return tokens + Tensor(pos.astype(tokens.dtype))
