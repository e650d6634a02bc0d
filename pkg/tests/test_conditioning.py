"""Tests for mpdit.conditioning -- spectral conv, time/class/patch embeddings."""

import logging

import numpy as np
import pytest

from mpdit.backbone import unpatchify
from mpdit.conditioning import (
    FNO_WIDTHS,
    PatchEmbedParams,
    SpectralConvWeights,
    class_token_batch,
    class_tokens,
    fno_time_embed,
    init_class_table,
    init_fno_time_embed,
    init_patch_embed,
    init_sinusoidal_time_embed,
    patch_embed,
    patchify,
    sincos_2d,
    sinusoidal_features,
    sinusoidal_time_embed,
    spectral_conv_1d,
)
from mpdit.errors import ConfigError, DimensionError, LabelError
from mpdit.layers import Linear, ParamFactory
from mpdit.tensor import Rng, Tensor, grad_check, precision


@pytest.fixture
def rng():
    """Create a seeded numpy RNG."""
    return np.random.default_rng(seed=42)


def _factory(seed=0, dtype=np.float32):
    return ParamFactory(Rng(seed), np.dtype(dtype))


def _naive_spectral_conv(x, w_real, w_imag):
    """Brute-force oracle: explicit DFT sums, per-mode complex mixing, Hermitian inverse."""
    batch, _, length = x.shape
    bins = length // 2 + 1
    modes = w_real.shape[2]
    j = np.arange(length)
    out = np.zeros((batch, w_real.shape[1], length))
    for k in range(modes):
        basis = np.exp(-2j * np.pi * k * j / length)
        xk = (x * basis).sum(axis=-1)  # (B, in)
        yk = xk @ (w_real[:, :, k] + 1j * w_imag[:, :, k])  # (B, out)
        if k == 0 or (length % 2 == 0 and k == bins - 1):
            out += yk.real[:, :, None] / length
        else:
            out += 2.0 * (yk[:, :, None] * np.exp(2j * np.pi * k * j / length)).real / length
    return out


# ---- Spectral convolution ----------------------------------------------------


@pytest.mark.parametrize("w_in", [1, 2, 32])
@pytest.mark.parametrize("w_out", [1, 2, 32])
@pytest.mark.parametrize("modes", [1, 8, 16])
@pytest.mark.parametrize("length", [8, 32])
@pytest.mark.parametrize("batch", [1, 3])
def test_spectral_conv_matches_naive_dft_oracle(rng, w_in, w_out, modes, length, batch):
    """Within 1e-5 of the brute-force oracle; modes beyond the bin count are a config error."""
    x = rng.standard_normal((batch, w_in, length))
    w_real = rng.standard_normal((w_in, w_out, modes))
    w_imag = rng.standard_normal((w_in, w_out, modes))
    weights = SpectralConvWeights(Tensor(w_real), Tensor(w_imag))
    if modes > length // 2 + 1:
        with pytest.raises(ConfigError):
            spectral_conv_1d(Tensor(x), weights)
        return
    got = spectral_conv_1d(Tensor(x), weights).data
    np.testing.assert_allclose(got, _naive_spectral_conv(x, w_real, w_imag), rtol=0, atol=1e-5)


def test_spectral_conv_identity_weights_pass_a_low_mode_cosine():
    modes, length = 8, 32
    x = np.cos(2.0 * np.pi * np.arange(length) / length).reshape(1, 1, length)
    weights = SpectralConvWeights(Tensor(np.ones((1, 1, modes))), Tensor(np.zeros((1, 1, modes))))
    np.testing.assert_allclose(spectral_conv_1d(Tensor(x), weights).data, x, rtol=0, atol=1e-5)


def test_spectral_conv_keeps_input_dtype(rng):
    x = Tensor(rng.standard_normal((2, 4, 32)).astype(np.float32))
    w = SpectralConvWeights(Tensor(rng.standard_normal((4, 4, 8))), Tensor(rng.standard_normal((4, 4, 8))))
    assert spectral_conv_1d(x, w).dtype == np.float32


def test_spectral_conv_channel_mismatch_raises(rng):
    w = SpectralConvWeights(Tensor(np.ones((4, 4, 2))), Tensor(np.ones((4, 4, 2))))
    with pytest.raises(DimensionError):
        spectral_conv_1d(Tensor(rng.standard_normal((1, 3, 8))), w)


def test_spectral_conv_gradients_match_finite_differences(rng):
    with precision(np.float64):
        x = Tensor(rng.standard_normal((2, 3, 16)), requires_grad=True)
        wr = Tensor(rng.standard_normal((3, 2, 5)), requires_grad=True)
        wi = Tensor(rng.standard_normal((3, 2, 5)), requires_grad=True)
        cotangent = Tensor(rng.standard_normal((2, 2, 16)))

        def f(inputs):
            a, r, i = inputs
            return (spectral_conv_1d(a, SpectralConvWeights(r, i)) * cotangent).sum()

        assert grad_check(f, [x, wr, wi]) <= 1e-5


# ---- FNO time embedding -------------------------------------------------------


def test_fno_time_embed_shape_and_dtype():
    params = init_fno_time_embed(_factory(), 64, width=32, modes=16, n_blocks=3)
    out = fno_time_embed(Tensor(np.array([0.0, 0.5, 1.0], dtype=np.float32)), params)
    assert out.shape == (3, 64)
    assert out.dtype == np.float32
    assert params.width == 32 and params.modes == 16


def test_fno_time_embed_distinguishes_timesteps():
    params = init_fno_time_embed(_factory(), 16, width=16, modes=8, n_blocks=2, spectral_init="scaled")
    out = fno_time_embed(Tensor(np.array([0.1, 0.9])), params).data
    assert not np.allclose(out[0], out[1])


@pytest.mark.parametrize("width", FNO_WIDTHS)
def test_fno_time_embed_with_zero_weights_outputs_zero(width):
    params = init_fno_time_embed(_factory(), 16, width=width, modes=8, n_blocks=3)
    for block in params.blocks:
        for leaf in (block.spectral.real, block.spectral.imag, block.local.weight, block.local.bias):
            leaf.data[...] = 0.0
    params.pool_proj.bias.data[...] = 0.0
    out = fno_time_embed(Tensor(np.array([0.0, 0.3, 1.0], dtype=np.float32)), params).data
    np.testing.assert_array_equal(out, np.zeros((3, 16), dtype=np.float32))


@pytest.mark.parametrize("n_blocks", [1, 5])
def test_fno_block_count_outside_ablation_range_raises(n_blocks):
    with pytest.raises(ConfigError):
        init_fno_time_embed(_factory(), 16, width=16, modes=8, n_blocks=n_blocks)


def test_out_of_range_timestep_logged_at_debug(caplog):
    params = init_fno_time_embed(_factory(), 16, width=16, modes=8, n_blocks=2)
    with caplog.at_level(logging.DEBUG, logger="mpdit.conditioning"):
        fno_time_embed(Tensor(np.array([1.5], dtype=np.float32)), params)
    assert any("outside [0, 1]" in r.getMessage() for r in caplog.records)


def test_fno_time_embed_gradients_match_finite_differences(rng):
    with precision(np.float64):
        params = init_fno_time_embed(_factory(3, np.float64), 8, width=16, modes=6, n_blocks=2, spectral_init="scaled")
        t = Tensor(np.array([0.2, 0.7]), requires_grad=True)
        cotangent = Tensor(rng.standard_normal((2, 8)))
        assert grad_check(lambda tt: (fno_time_embed(tt, params) * cotangent).sum(), t) <= 1e-5


# ---- Sinusoidal time embedding -------------------------------------------------


def test_sinusoidal_features_interleave_sin_and_cos():
    t = Tensor(np.array([0.25]))
    feats = sinusoidal_features(t, 8, time_scale=1000.0).data[0]
    freqs = np.exp(-np.log(10000.0) * np.arange(4) / 4) * 1000.0
    np.testing.assert_allclose(feats[0::2], np.sin(0.25 * freqs), atol=1e-9)
    np.testing.assert_allclose(feats[1::2], np.cos(0.25 * freqs), atol=1e-9)


@pytest.mark.parametrize("n_linear", [1, 2, 3])
def test_sinusoidal_embed_layer_counts(n_linear):
    params = init_sinusoidal_time_embed(_factory(), 32, n_linear=n_linear, freq_dim=16)
    assert len(params.layers) == n_linear
    assert sinusoidal_time_embed(Tensor(np.array([0.3, 0.6], dtype=np.float32)), params).shape == (2, 32)


def test_sinusoidal_embed_rejects_four_layers():
    with pytest.raises(ConfigError):
        init_sinusoidal_time_embed(_factory(), 32, n_linear=4)


# ---- Class embedding -----------------------------------------------------------


def test_class_tokens_reshape_one_row_into_m_tokens():
    tbl = init_class_table(_factory(), num_classes=5, tokens=4, hidden_size=8)
    toks = class_tokens(2, tbl).data
    assert toks.shape == (4, 8)
    np.testing.assert_array_equal(toks.reshape(-1), tbl.table.data[2])


def test_null_class_is_the_last_row():
    tbl = init_class_table(_factory(), num_classes=5, tokens=2, hidden_size=8)
    assert tbl.null_class == 5
    np.testing.assert_array_equal(class_tokens(5, tbl).data.reshape(-1), tbl.table.data[5])


@pytest.mark.parametrize("label", [-1, 6])
def test_class_index_out_of_range_raises_label_error(label):
    tbl = init_class_table(_factory(), num_classes=5, tokens=2, hidden_size=8)
    with pytest.raises(LabelError):
        class_tokens(label, tbl)
    with pytest.raises(LabelError):
        class_token_batch(np.array([0, label]), tbl)


def test_class_token_batch_shape():
    tbl = init_class_table(_factory(), num_classes=3, tokens=4, hidden_size=8)
    assert class_token_batch(np.array([0, 3, 1]), tbl).shape == (3, 4, 8)


# ---- Patch embedding -----------------------------------------------------------


def test_patchify_orders_patches_row_major(rng):
    z = rng.standard_normal((1, 4, 4, 3))
    tokens = patchify(Tensor(z), 2).data
    assert tokens.shape == (1, 4, 12)
    np.testing.assert_array_equal(tokens[0, 1], z[0, 0:2, 2:4, :].reshape(-1))
    np.testing.assert_array_equal(tokens[0, 2], z[0, 2:4, 0:2, :].reshape(-1))


@pytest.mark.parametrize("p", [1, 2, 4])
def test_unpatchify_inverts_patchify(rng, p):
    z = rng.standard_normal((2, 8, 8, 4))
    np.testing.assert_array_equal(unpatchify(patchify(Tensor(z), p), p, 8, 8).data, z)


def test_patch_embed_adds_fixed_positions():
    params = init_patch_embed(_factory(), 2, (4, 4, 2), 8)
    out = patch_embed(Tensor(np.zeros((1, 4, 4, 2), dtype=np.float32)), params).data
    np.testing.assert_allclose(out[0], sincos_2d(2, 2, 8) + params.proj.bias.data, atol=1e-7)


def test_patch_embed_is_invertible_through_the_projection(rng):
    z = rng.standard_normal((2, 4, 4, 2))
    weight = rng.standard_normal((8, 8)) + 4.0 * np.eye(8)
    bias = rng.standard_normal(8)
    params = PatchEmbedParams(2, Linear(Tensor(weight), Tensor(bias)), grid=(2, 2))
    out = patch_embed(Tensor(z), params).data
    recovered = (out - sincos_2d(2, 2, 8) - bias) @ np.linalg.inv(weight)
    np.testing.assert_allclose(recovered, patchify(Tensor(z), 2).data, rtol=0, atol=1e-5)


def test_sincos_rows_share_first_half():
    table = sincos_2d(3, 3, 16)
    assert table.shape == (9, 16)
    np.testing.assert_array_equal(table[0, :8], table[2, :8])
    np.testing.assert_array_equal(table[0, 8:], table[6, 8:])


def test_patch_size_must_divide_latent():
    with pytest.raises(ConfigError, match="p=3"):
        init_patch_embed(_factory(), 3, (8, 8, 4), 16)
