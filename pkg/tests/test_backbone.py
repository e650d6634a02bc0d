"""Tests for mpdit.backbone -- config validation, blocks, upsampling and the full forward."""

import logging
from dataclasses import replace

import numpy as np
import pytest
from scipy import special

from mpdit.backbone import (
    UPSAMPLE_VARIANTS,
    Mpdit,
    MpditConfig,
    TokenSequence,
    UpsampleWeights,
    dit_block,
    forward,
    init_mpdit,
    split_modulation,
    upsample_block,
)
from mpdit.conditioning import sincos_2d
from mpdit.errors import ConfigError, DimensionError
from mpdit.layers import map_tensors, parameters
from mpdit.presets import get_preset
from mpdit.tensor import Rng, Tensor, grad_check, precision


@pytest.fixture
def rng():
    """Create a seeded numpy RNG."""
    return np.random.default_rng(seed=42)


def _tiny_config(**overrides):
    base = MpditConfig(
        name="test",
        stages=((4, 1), (2, 1)),
        hidden_size=16,
        num_heads=2,
        class_tokens=2,
        num_classes=3,
        latent=(8, 8, 2),
        fno_width=16,
        fno_modes=8,
        spectral_init="scaled",
    )
    return replace(base, **overrides)


def _random_params(cfg, seed=0, scale=0.1):
    """float64 parameters with every entry moved off its initial value."""
    noise = Rng(seed + 1)
    params = init_mpdit(cfg, Rng(seed), dtype=np.float64)
    return map_tensors(params, lambda t: Tensor(t.data + scale * noise.normal(t.shape, dtype=np.float64), True))


def _inputs(cfg, batch, seed=0):
    r = np.random.default_rng(seed)
    z = r.standard_normal((batch, *cfg.latent))
    t = r.uniform(size=batch)
    labels = r.integers(0, cfg.num_classes + 1, size=batch)
    return z, t, labels


# ---- Config validation ---------------------------------------------------------


@pytest.mark.parametrize(
    "overrides, field",
    [
        (dict(stages=((4, 1), (4, 1))), "model.stages"),
        (dict(stages=((3, 1),)), "model.stages"),
        (dict(num_heads=3), "model.num_heads"),
        (dict(upsample="bilinear"), "model.upsample"),
        (dict(fno_blocks=5), "model.fno_blocks"),
        (dict(fno_modes=18), "model.fno_modes"),
        (dict(time_embed="sinusoidal", n_linear=4), "model.n_linear"),
    ],
)
def test_invalid_config_names_the_field(overrides, field):
    with pytest.raises(ConfigError) as exc:
        _tiny_config(**overrides).validate()
    assert exc.value.field == field


def test_fno_width_128_warns_then_fails(caplog):
    with caplog.at_level(logging.WARNING, logger="mpdit.backbone"):
        with pytest.raises(ConfigError):
            _tiny_config(fno_width=128).validate()
    assert any("128" in r.getMessage() for r in caplog.records)


def test_config_properties():
    cfg = _tiny_config(stages=((8, 2), (4, 3), (2, 1)))
    assert cfg.depth == 6
    assert cfg.final_patch == 2
    assert cfg.image_tokens(4) == 4
    assert cfg.head_dim == 8


# ---- Identity at init ------------------------------------------------------------


@pytest.mark.parametrize("preset", ["tiny", "gradcheck"])
def test_fresh_network_outputs_exact_zero(preset):
    """Zero-initialised modulation and final projection make the initial field identically zero."""
    cfg = get_preset(preset)
    model = Mpdit.create(cfg, seed=0)
    z, t, labels = _inputs(cfg, 4)
    out = model(Tensor(z.astype(np.float32)), t.astype(np.float32), labels)
    assert out.shape == z.shape
    assert np.all(out.data == 0.0)


def test_forward_rejects_wrong_latent_shape():
    cfg = _tiny_config()
    model = Mpdit.create(cfg)
    with pytest.raises(DimensionError):
        model(Tensor(np.zeros((1, 4, 4, 2), dtype=np.float32)), np.zeros(1, dtype=np.float32), np.array([0]))


# ---- DiT equivalence ---------------------------------------------------------------


def _ln(x, gain, bias, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def _silu(x):
    return x * special.expit(x)


def _gelu(x):
    return x * 0.5 * (1.0 + special.erf(x / np.sqrt(2.0)))


def _lin(layer, x):
    return x @ layer.weight.data + layer.bias.data


def _reference_dit(params, cfg, z, t, labels):
    """Plain DiT forward written directly in numpy."""
    B = z.shape[0]
    D = cfg.hidden_size
    p = cfg.final_patch
    h, w, d = cfg.latent
    half = cfg.freq_dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half) * 1000.0
    args = t[:, None] * freqs
    feats = np.stack([np.sin(args), np.cos(args)], axis=-1).reshape(B, cfg.freq_dim)
    layers = params.time_embed.layers
    emb = feats
    for i, layer in enumerate(layers):
        emb = _lin(layer, emb)
        if i < len(layers) - 1:
            emb = _silu(emb)
    cond = _silu(emb)

    table = params.class_table.table.data
    cls = table[labels].reshape(B, cfg.class_tokens, D)
    patches = z.reshape(B, h // p, p, w // p, p, d).transpose(0, 1, 3, 2, 4, 5).reshape(B, -1, p * p * d)
    tokens = _lin(params.patch_embeds[0].proj, patches) + sincos_2d(h // p, w // p, D)
    x = np.concatenate([cls, tokens], axis=1)

    H = cfg.num_heads
    hd = D // H
    for blk in params.stages[0]:
        mod = _lin(blk.adaln, cond).reshape(B, 6, D)[:, :, None, :]
        shift1, scale1, gate1, shift2, scale2, gate2 = (mod[:, i] for i in range(6))
        y = _ln(x, blk.norm1.gain.data, blk.norm1.bias.data) * (1 + scale1) + shift1
        qkv = _lin(blk.qkv, y).reshape(B, -1, 3, H, hd)
        q, k, v = (qkv[:, :, i].transpose(0, 2, 1, 3) for i in range(3))
        s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(hd)
        a = np.exp(s - s.max(axis=-1, keepdims=True))
        a = a / a.sum(axis=-1, keepdims=True)
        att = (a @ v).transpose(0, 2, 1, 3).reshape(B, -1, D)
        x = x + gate1 * _lin(blk.proj, att)
        y = _ln(x, blk.norm2.gain.data, blk.norm2.bias.data) * (1 + scale2) + shift2
        x = x + gate2 * _lin(blk.fc2, _gelu(_lin(blk.fc1, y)))

    fmod = _lin(params.final.adaln, cond).reshape(B, 2, D)[:, :, None, :]
    img = x[:, cfg.class_tokens :]
    y = _ln(img, params.final.norm.gain.data, params.final.norm.bias.data) * (1 + fmod[:, 1]) + fmod[:, 0]
    out = _lin(params.final.proj, y)
    return out.reshape(B, h // p, w // p, p, p, d).transpose(0, 1, 3, 2, 4, 5).reshape(B, h, w, d)


def test_single_stage_forward_equals_plain_dit_reference():
    """A [(2, N)] config with per-block adaLN and sinusoidal time is a DiT, to 1e-6 on 20 inputs."""
    cfg = MpditConfig(
        name="dit-micro",
        stages=((2, 2),),
        hidden_size=16,
        num_heads=2,
        class_tokens=1,
        num_classes=4,
        latent=(4, 4, 2),
        time_embed="sinusoidal",
        adaln="per_block",
        freq_dim=16,
    )
    params = _random_params(cfg, seed=5)
    z, t, labels = _inputs(cfg, 20, seed=9)
    with precision(np.float64):
        got = forward(params, cfg, Tensor(z), t, labels).data
    np.testing.assert_allclose(got, _reference_dit(params, cfg, z, t, labels), rtol=0, atol=1e-6)


# ---- Upsample block -------------------------------------------------------------------


def _upsample_weights(variant, D=8, seed=0):
    cfg = _tiny_config(hidden_size=D, upsample=variant)
    return init_mpdit(cfg, Rng(seed), dtype=np.float64).upsamples[0]


def test_upsample_with_zero_expansion_only_refines_class_tokens(rng):
    D, m = 8, 2
    weights = _upsample_weights("linear_linear", D=D)
    refine = weights.refine[0]
    for leaf in (weights.expand.weight, weights.expand.bias, weights.norm.bias, refine.bias):
        leaf.data[...] = 0.0
    x = rng.standard_normal((2, m + 4, D))
    out = upsample_block(TokenSequence(Tensor(x), m), weights).tokens.data
    assert out.shape == (2, m + 16, D)
    np.testing.assert_allclose(out[:, m:], 0.0, atol=1e-12)
    expected = _ln(x[:, :m], weights.norm.gain.data, 0.0) @ refine.weight.data
    np.testing.assert_allclose(out[:, :m], expected, atol=1e-10)


def test_upsample_places_chunk_ab_of_token_ij_at_fine_position(rng):
    """Coarse token (i, j), chunk (a, b) becomes fine token (2i + a, 2j + b)."""
    D, m, side, B = 8, 2, 2, 3
    weights = _upsample_weights("linear", D=D)
    x = rng.standard_normal((B, m + side * side, D))
    out = upsample_block(TokenSequence(Tensor(x), m), weights).tokens.data
    assert out.shape == (B, m + 4 * side * side, D)

    y = x[:, m:] @ weights.expand.weight.data + weights.expand.bias.data
    fine = np.zeros((B, 2 * side, 2 * side, D))
    for i in range(side):
        for j in range(side):
            for a in range(2):
                for b in range(2):
                    chunk = 2 * a + b
                    fine[:, 2 * i + a, 2 * j + b] = y[:, i * side + j, chunk * D : (chunk + 1) * D]
    seq = np.concatenate([x[:, :m], _gelu(fine.reshape(B, -1, D))], axis=1)
    expected = _ln(seq, weights.norm.gain.data, weights.norm.bias.data)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_linear_conv_refines_image_tokens_only(rng):
    weights = _upsample_weights("linear_conv", D=8)
    x = rng.standard_normal((2, 2 + 4, 8))
    plain = UpsampleWeights(weights.expand, weights.norm, [], "linear")
    out = upsample_block(TokenSequence(Tensor(x), 2), weights).tokens.data
    ref = upsample_block(TokenSequence(Tensor(x), 2), plain).tokens.data
    np.testing.assert_array_equal(out[:, :2], ref[:, :2])
    assert not np.allclose(out[:, 2:], ref[:, 2:])


def test_upsample_needs_square_token_grid(rng):
    weights = _upsample_weights("linear", D=8)
    with pytest.raises(DimensionError):
        upsample_block(TokenSequence(Tensor(rng.standard_normal((1, 2 + 3, 8))), 2), weights)


@pytest.mark.parametrize("variant", UPSAMPLE_VARIANTS)
def test_upsample_gradients_match_finite_differences(rng, variant):
    with precision(np.float64):
        weights = _upsample_weights(variant, D=8)
        x = Tensor(rng.standard_normal((2, 2 + 4, 8)), requires_grad=True)
        cotangent = Tensor(rng.standard_normal((2, 2 + 16, 8)))

        def f(inputs):
            return (upsample_block(TokenSequence(inputs[0], 2), weights).tokens * cotangent).sum()

        assert grad_check(f, [x, *parameters(weights)], max_coords=6, atol=1e-8) <= 1e-4


# ---- DiT block ---------------------------------------------------------------------------


def test_dit_block_gradients_match_finite_differences(rng):
    cfg = _tiny_config()
    params = _random_params(cfg)
    block = params.stages[0][0]
    with precision(np.float64):
        x = Tensor(rng.standard_normal((2, 6, 16)), requires_grad=True)
        cond = Tensor(rng.standard_normal((2, 96)), requires_grad=True)
        cotangent = Tensor(rng.standard_normal((2, 6, 16)))

        def f(inputs):
            out = dit_block(TokenSequence(inputs[0], 2), split_modulation(inputs[1], 6), block, cfg.num_heads)
            return (out.tokens * cotangent).sum()

        assert grad_check(f, [x, cond, *parameters(block)], max_coords=8, atol=1e-8) <= 1e-4


def test_attention_hook_sees_row_stochastic_weights():
    cfg = _tiny_config()
    params = _random_params(cfg)
    seen = []
    z, t, labels = _inputs(cfg, 2)
    with precision(np.float64):
        forward(params, cfg, Tensor(z), t, labels, on_attention=seen.append)
    assert len(seen) == cfg.depth
    assert seen[0].shape == (2, 2, 2 + 4, 2 + 4)
    assert seen[1].shape == (2, 2, 2 + 16, 2 + 16)
    np.testing.assert_allclose(seen[1].sum(axis=-1), 1.0)


# ---- Whole network -------------------------------------------------------------------------


@pytest.mark.parametrize(
    "overrides",
    [
        dict(),
        dict(adaln="per_block"),
        dict(time_embed="sinusoidal", n_linear=3, freq_dim=32),
        dict(stages=((8, 1), (4, 1), (2, 1))),
        dict(stages=((2, 2),)),
        dict(class_tokens=1),
        dict(upsample="conv_transpose"),
    ],
)
def test_forward_runs_for_ablation_variants(overrides):
    cfg = _tiny_config(**overrides)
    params = _random_params(cfg)
    z, t, labels = _inputs(cfg, 3)
    with precision(np.float64):
        out = forward(params, cfg, Tensor(z), t, labels)
    assert out.shape == z.shape
    assert np.isfinite(out.data).all()


def test_null_class_changes_the_prediction():
    cfg = _tiny_config()
    model = Mpdit(cfg, _random_params(cfg))
    z, t, _ = _inputs(cfg, 1)
    with precision(np.float64):
        cond = model(Tensor(z), t, np.array([0])).data
        uncond = model(Tensor(z), t, np.array([model.null_class])).data
    assert model.null_class == 3
    assert not np.allclose(cond, uncond)


def test_shape_only_init_allocates_no_parameter_memory():
    params = init_mpdit(get_preset("mpdit-xl"), shape_only=True)
    leaves = parameters(params)
    assert all(t.data.strides == (0,) * t.ndim for t in leaves if t.ndim)
