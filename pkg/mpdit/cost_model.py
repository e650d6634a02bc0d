"""Closed-form parameter and GFLOPs accounting.

Counting convention: one multiply-accumulate (MAC) is one FLOP, at batch
size 1. LayerNorm, softmax, GELU and other elementwise work are excluded.
Per DiT block with L tokens (class + image) and MLP ratio r:

    linear     (4 + 2r) * L * D^2      (qkv 3, proj 1, MLP 2r)
    attention  2 * L_att^2 * D         (scores + weighted sum)

``attention="finest"`` counts L_att at the finest stage's token count for
every block (the published reporting convention); ``attention="stage"``
uses each stage's own L. Breakdowns are integer MACs, so totals equal the
sum of their parts exactly.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Iterable

from mpdit.backbone import MpditConfig
from mpdit.errors import ConfigError
from mpdit.presets import MODEL_PRESETS

ATTENTION_CONVENTIONS = ("finest", "stage")
ATTENTION_NOTES = {
    "finest": "attention in every block counted at the finest stage's token count (--attention stage for per-stage L)",
    "stage": "attention counted at each stage's own token count",
}
CSV_HEADER = "name,params,gflops,ratio_vs_baseline"


@dataclass
class CostReport:
    name: str
    params_total: int
    macs_total: int
    params_breakdown: dict[str, int] = field(default_factory=dict)
    macs_breakdown: dict[str, int] = field(default_factory=dict)
    baseline: str | None = None
    ratio_vs_baseline: float | None = None

    @property
    def gflops_total(self) -> float:
        return self.macs_total / 1e9

    @property
    def gflops_breakdown(self) -> dict[str, float]:
        return {k: v / 1e9 for k, v in self.macs_breakdown.items()}


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


def _linear(fan_in: int, fan_out: int, bias: bool = True) -> int:
    return fan_in * fan_out + (fan_out if bias else 0)


def param_breakdown(cfg: MpditConfig) -> dict[str, int]:
    cfg.validate()
    D = cfg.hidden_size
    r = cfg.mlp_ratio
    _, _, d = cfg.latent
    per_block_adaln = cfg.adaln == "per_block"
    parts: dict[str, int] = {}

    if cfg.time_embed == "fno":
        W, modes = cfg.fno_width, cfg.fno_modes
        fno_block = 2 * W * W * modes + _linear(W, W)
        parts["time_embed"] = _linear(1, W) + cfg.fno_blocks * fno_block + _linear(W, D)
    else:
        parts["time_embed"] = _linear(cfg.freq_dim, D) + (cfg.n_linear - 1) * _linear(D, D)

    parts["class_embed"] = (cfg.num_classes + 1) * cfg.class_tokens * D
    parts["patch_embed"] = sum(_linear(p * p * d, D) for p, _ in cfg.stages)

    block = 4 * D + _linear(D, 3 * D) + _linear(D, D) + _linear(D, r * D) + _linear(r * D, D)
    if per_block_adaln:
        block += _linear(D, 6 * D)
    for i, (_, n) in enumerate(cfg.stages):
        parts[f"blocks_stage{i}"] = n * block

    for i in range(1, len(cfg.stages)):
        if cfg.upsample == "conv_transpose":
            expand = 4 * D * D + D
        else:
            expand = _linear(D, 4 * D)
        if cfg.upsample in ("linear_linear", "linear_conv"):
            refine = _linear(D, D)
        elif cfg.upsample == "linear_mlp":
            hidden = cfg.upsample_mlp_ratio * D
            refine = _linear(D, hidden) + _linear(hidden, D)
        else:
            refine = 0
        parts[f"upsample{i}"] = expand + 2 * D + refine

    parts["adaln"] = 0 if per_block_adaln else _linear(D, 6 * D)
    p = cfg.final_patch
    parts["final"] = 2 * D + _linear(D, p * p * d) + (_linear(D, 2 * D) if per_block_adaln else 0)
    return parts


def count_params(cfg: MpditConfig) -> int:
    """Exact number of scalar parameters ``init_mpdit(cfg)`` creates."""
    return sum(param_breakdown(cfg).values())


# ---------------------------------------------------------------------------
# GFLOPs
# ---------------------------------------------------------------------------


def mac_breakdown(cfg: MpditConfig, attention: str = "finest") -> dict[str, int]:
    if attention not in ATTENTION_CONVENTIONS:
        raise ConfigError("attention", f"must be one of {ATTENTION_CONVENTIONS}, got {attention!r}")
    cfg.validate()
    D = cfg.hidden_size
    r = cfg.mlp_ratio
    m = cfg.class_tokens
    _, _, d = cfg.latent
    parts: dict[str, int] = {}

    if cfg.time_embed == "fno":
        W, modes, G = cfg.fno_width, cfg.fno_modes, 32
        bins = G // 2 + 1
        fno_block = W * G * 2 * bins + 4 * W * W * modes + 2 * bins * G * W + G * W * W
        parts["time_embed"] = G * W + cfg.fno_blocks * fno_block + W * D
    else:
        parts["time_embed"] = cfg.freq_dim * D + (cfg.n_linear - 1) * D * D

    if cfg.adaln == "per_block":
        parts["adaln"] = cfg.depth * 6 * D * D + 2 * D * D
    else:
        parts["adaln"] = 6 * D * D

    parts["patch_embed"] = sum(cfg.image_tokens(p) * p * p * d * D for p, _ in cfg.stages)

    finest_len = m + cfg.image_tokens(cfg.final_patch)
    for i, (p, n) in enumerate(cfg.stages):
        seq = m + cfg.image_tokens(p)
        att_len = finest_len if attention == "finest" else seq
        parts[f"blocks_stage{i}"] = n * ((4 + 2 * r) * seq * D * D + 2 * att_len * att_len * D)

    for i in range(1, len(cfg.stages)):
        coarse = cfg.image_tokens(cfg.stages[i - 1][0])
        fine = cfg.image_tokens(cfg.stages[i][0])
        macs = coarse * 4 * D * D
        if cfg.upsample == "linear_linear":
            macs += (m + fine) * D * D
        elif cfg.upsample == "linear_mlp":
            macs += 2 * cfg.upsample_mlp_ratio * (m + fine) * D * D
        elif cfg.upsample == "linear_conv":
            macs += fine * D * D
        parts[f"upsample{i}"] = macs

    p = cfg.final_patch
    parts["final"] = cfg.image_tokens(p) * D * p * p * d
    return parts


def count_gflops(cfg: MpditConfig, attention: str = "finest") -> float:
    """Forward-pass cost at batch 1 in 1e9 MACs."""
    return sum(mac_breakdown(cfg, attention).values()) / 1e9


def cost_report(cfg: MpditConfig, attention: str = "finest") -> CostReport:
    params = param_breakdown(cfg)
    macs = mac_breakdown(cfg, attention)
    return CostReport(
        name=cfg.name,
        params_total=sum(params.values()),
        macs_total=sum(macs.values()),
        params_breakdown=params,
        macs_breakdown=macs,
    )


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


@dataclass
class CostTable:
    rows: list[CostReport]
    attention: str
    baseline: str | None

    def header(self) -> str:
        return (
            "# GFLOPs = 1e9 multiply-accumulates per forward at batch 1; "
            f"{ATTENTION_NOTES[self.attention]}"
        )

    def to_text(self) -> str:
        lines = [self.header(), f"{'name':<24} {'params(M)':>10} {'GFLOPs':>9} {'ratio':>8}"]
        for row in self.rows:
            ratio = "" if row.ratio_vs_baseline is None else f"{100 * row.ratio_vs_baseline:.1f}%"
            lines.append(f"{row.name:<24} {row.params_total / 1e6:>10.1f} {row.gflops_total:>9.2f} {ratio:>8}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for row in self.rows:
            ratio = "" if row.ratio_vs_baseline is None else f"{row.ratio_vs_baseline:.6f}"
            buf.write(f"{row.name},{row.params_total},{row.gflops_total:.6f},{ratio}\n")
        return buf.getvalue()


def report(
    configs: Iterable[MpditConfig],
    baseline: str | None = None,
    attention: str = "finest",
) -> CostTable:
    """Tabulate costs; ratios are GFLOPs relative to ``baseline``.

    The baseline may be one of ``configs`` or any named preset.
    """
    configs = list(configs)
    rows = [cost_report(cfg, attention) for cfg in configs]
    if baseline is not None:
        by_name = {cfg.name: cfg for cfg in configs}
        if baseline not in by_name:
            if baseline not in MODEL_PRESETS:
                raise ConfigError("baseline", f"unknown baseline config {baseline!r}")
            by_name[baseline] = MODEL_PRESETS[baseline]
        base = cost_report(by_name[baseline], attention)
        for row in rows:
            row.baseline = baseline
            row.ratio_vs_baseline = row.macs_total / base.macs_total
    return CostTable(rows=rows, attention=attention, baseline=baseline)
