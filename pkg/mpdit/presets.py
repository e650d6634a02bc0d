"""Named model configurations.

Analysis presets reproduce the published B and XL shapes (256px setting:
32x32x4 latents; 512px setting: 64x64x4). They are instantiated shape-only
for parameter accounting and never trained. ``tiny`` and ``gradcheck`` are
desk-scale configs that actually run.
"""

from __future__ import annotations

from dataclasses import replace

from mpdit.backbone import MpditConfig
from mpdit.errors import ConfigError

# ---------------------------------------------------------------------------
# Shape families
# ---------------------------------------------------------------------------

_B = dict(hidden_size=768, num_heads=12, num_classes=1000, latent=(32, 32, 4))
_XL = dict(hidden_size=1152, num_heads=16, num_classes=1000, latent=(32, 32, 4))
_XL_512 = dict(_XL, latent=(64, 64, 4))

# DiT baseline: one stage at p=2, one class token, sinusoidal time MLP,
# per-block modulation.
_DIT = dict(class_tokens=1, time_embed="sinusoidal", adaln="per_block")

# ---------------------------------------------------------------------------
# Preset table
# ---------------------------------------------------------------------------

MODEL_PRESETS: dict[str, MpditConfig] = {
    # B family, plus the component ladder from plain DiT to MPDiT.
    "dit-b-2": MpditConfig(name="dit-b-2", stages=((2, 12),), **_B, **_DIT),
    "dit-b-2+shared": MpditConfig(
        name="dit-b-2+shared", stages=((2, 12),), **_B, **dict(_DIT, adaln="shared")
    ),
    "dit-b-2+shared+m16": MpditConfig(
        name="dit-b-2+shared+m16",
        stages=((2, 12),),
        **_B,
        **dict(_DIT, adaln="shared", class_tokens=16),
    ),
    "dit-b-2+shared+m16+fno": MpditConfig(name="dit-b-2+shared+m16+fno", stages=((2, 12),), **_B),
    "mpdit-b-k4": MpditConfig(name="mpdit-b-k4", stages=((4, 8), (2, 4)), **_B),
    "mpdit-b": MpditConfig(name="mpdit-b", stages=((4, 6), (2, 6)), **_B),
    "mpdit-b-k8": MpditConfig(name="mpdit-b-k8", stages=((4, 4), (2, 8)), **_B),
    # XL family.
    "dit-xl-2": MpditConfig(name="dit-xl-2", stages=((2, 28),), **_XL, **_DIT),
    "mpdit-xl-k4": MpditConfig(name="mpdit-xl-k4", stages=((4, 24), (2, 4)), **_XL),
    "mpdit-xl": MpditConfig(name="mpdit-xl", stages=((4, 22), (2, 6)), **_XL),
    "mpdit-xl-k8": MpditConfig(name="mpdit-xl-k8", stages=((4, 20), (2, 8)), **_XL),
    # 512px setting.
    "dit-xl-2-512": MpditConfig(name="dit-xl-2-512", stages=((2, 28),), **_XL_512, **_DIT),
    "mpdit-xl-512-22-6": MpditConfig(name="mpdit-xl-512-22-6", stages=((4, 22), (2, 6)), **_XL_512),
    "mpdit-xl-512-18-6-4": MpditConfig(
        name="mpdit-xl-512-18-6-4", stages=((8, 18), (4, 6), (2, 4)), **_XL_512
    ),
    # Desk scale.
    "tiny": MpditConfig(
        name="tiny",
        stages=((4, 4), (2, 2)),
        hidden_size=64,
        num_heads=4,
        class_tokens=4,
        num_classes=10,
        latent=(8, 8, 4),
        spectral_init="scaled",
    ),
    "gradcheck": MpditConfig(
        name="gradcheck",
        stages=((4, 1), (2, 1)),
        hidden_size=16,
        num_heads=2,
        class_tokens=2,
        num_classes=3,
        latent=(8, 8, 2),
        fno_width=16,
        fno_modes=8,
        spectral_init="scaled",
    ),
}

ANALYSIS_PRESETS = tuple(name for name in MODEL_PRESETS if name not in ("tiny", "gradcheck"))


def get_preset(name: str) -> MpditConfig:
    try:
        return MODEL_PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(MODEL_PRESETS))
        raise ConfigError("model.preset", f"unknown preset {name!r} (known: {known})") from None


def with_overrides(base: MpditConfig | str, **overrides) -> MpditConfig:
    """Copy of ``base`` with fields replaced; the result is validated."""
    cfg = get_preset(base) if isinstance(base, str) else base
    unknown = set(overrides) - set(MpditConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError("model." + sorted(unknown)[0], "unknown model field")
    out = replace(cfg, **overrides)
    out.validate()
    return out
