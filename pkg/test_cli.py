#!/usr/bin/env python3
"""
CLI smoke script for the MPDiT toolkit.

Tests:
1. Parameter / GFLOPs table for the B and XL presets
2. Short tiny-preset training run with a resume from checkpoint
3. Euler sampling from the EMA weights, with and without guidance
4. Finite-difference gradient suite on the micro network
"""

from __future__ import annotations

import sys
import tempfile
import time
from pathlib import Path

# Ensure project root is on the path
ROOT = Path(__file__).parent
sys.path.insert(0, str(ROOT))

import numpy as np

from harness.artifacts import read_metrics
from harness.config import parse_run_config_text
from harness.gradcheck import GRADCHECK_TOLERANCE, gradcheck_suite
from harness.services import checkpoint_path, run_training
from mpdit.backbone import Mpdit
from mpdit.cost_model import report
from mpdit.dataset import class_means
from mpdit.presets import get_preset
from mpdit.sampler import SampleConfig, sample_grid

WORK = Path(tempfile.mkdtemp(prefix="mpdit_smoke_"))

RUN_TEXT = f"""\
model:
  preset: tiny
train:
  learning_rate: 1.0e-3
  batch_size: 64
  ema_decay: 0.99
  total_steps: 40
  log_every: 5
  checkpoint_every: 20
dataset:
  n_per_class: 64
paths:
  checkpoint_dir: '{WORK}/ckpt'
  metrics_file: '{WORK}/metrics.jsonl'
  output_dir: '{WORK}/samples'
"""

# ──────────────────────────────────────────────
# 1. Cost tables
# ──────────────────────────────────────────────

print("=" * 60)
print("STEP 1: Parameter and GFLOPs tables")
print("=" * 60)

for baseline, names in (
    ("dit-b-2", ["dit-b-2", "mpdit-b-k4", "mpdit-b", "mpdit-b-k8"]),
    ("dit-xl-2", ["dit-xl-2", "mpdit-xl-k4", "mpdit-xl", "mpdit-xl-k8"]),
):
    table = report([get_preset(n) for n in names], baseline=baseline)
    print(table.to_text(), end="")
    mpdit_row = next(r for r in table.rows if r.name == names[2])
    print(f"✓ {names[2]} costs {mpdit_row.ratio_vs_baseline:.1%} of {baseline}")
    print()

# ──────────────────────────────────────────────
# 2. Training with a resume
# ──────────────────────────────────────────────

print("=" * 60)
print("STEP 2: Training the tiny preset")
print("=" * 60)

cfg = parse_run_config_text(RUN_TEXT)
paths = cfg.resolved_paths()
t0 = time.perf_counter()
run_training(cfg, stop_at=20)
print(f"✓ Trained to step 20 in {time.perf_counter() - t0:.2f}s (run {cfg.run_id})")

state = run_training(cfg, ckpt=str(checkpoint_path(paths.checkpoint_dir, 20)))
records = read_metrics(paths.metrics_file)
print(f"✓ Resumed to step {state.step}; {len(records)} metric records")
for record in records:
    print(f"  step {record['step']:>3}: loss {record['loss']:.4f}  grad_norm {record['grad_norm']:.3f}")

# ──────────────────────────────────────────────
# 3. Sampling
# ──────────────────────────────────────────────

print()
print("=" * 60)
print("STEP 3: Sampling from the EMA weights")
print("=" * 60)

model = Mpdit(cfg.model, state.ema)
means = class_means(cfg.dataset)
for scale in (1.0, 2.0):
    sc = SampleConfig(n_steps=20, cfg_scale=scale, samples_per_class=4, batch_size=16)
    t0 = time.perf_counter()
    grid = sample_grid(model, [0, 1, 2], sc, cfg.model.latent)
    err = np.mean([np.abs(grid.latents[grid.labels == c].mean(axis=0) - means[c]).mean() for c in grid.classes])
    print(
        f"✓ cfg {scale:.1f}: {grid.latents.shape[0]} latents in {time.perf_counter() - t0:.2f}s, "
        f"mean abs error vs class means {err:.3f}"
    )

# ──────────────────────────────────────────────
# 4. Gradient check
# ──────────────────────────────────────────────

print()
print("=" * 60)
print("STEP 4: Finite-difference gradient suite")
print("=" * 60)

results = gradcheck_suite(get_preset("gradcheck"), seed=0, max_coords=4, network_coords=4)
for name, err in results.items():
    print(f"  {name:<20} {err:.3e}")
worst = max(results.values())
status = "✓" if worst <= GRADCHECK_TOLERANCE else "✗"
print(f"{status} max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")

print()
print(f"Artifacts left in {WORK}")
