"""Command implementations behind the ``mpdit`` CLI."""

from __future__ import annotations

import logging
import os
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from tqdm import tqdm

from harness.artifacts import (
    MetricsWriter,
    read_metrics,
    truncate_metrics,
    write_class_grids,
    write_loss_csv,
    write_loss_curve,
)
from harness.checkpoint import load_checkpoint, save_checkpoint
from harness.config import RunConfig, canonical_text, load_run_config
from harness.container import load_tensors, save_tensors
from harness.gradcheck import GRADCHECK_TOLERANCE, gradcheck_suite
from mpdit.backbone import Mpdit
from mpdit.cost_model import ATTENTION_CONVENTIONS, report
from mpdit.dataset import BatchProducer, LatentDataset, generate_dataset
from mpdit.errors import ConfigError, DimensionError, GradcheckError, LabelError
from mpdit.flow_matching import TrainState, init_train_state, train_step
from mpdit.presets import ANALYSIS_PRESETS, get_preset
from mpdit.sampler import sample_grid
from registry.database import open_registry
from registry.runs import finish_run, record_checkpoint, record_progress, register_run

logger = logging.getLogger(__name__)

DETERMINISTIC_ENV = "MPDIT_DETERMINISTIC"
LATEST_CHECKPOINT = "latest.mpdt"
SAMPLES_FILE = "samples.mpdt"


def deterministic_requested(flag: bool = False) -> bool:
    return flag or os.environ.get(DETERMINISTIC_ENV, "") == "1"


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


def load_dataset(cfg: RunConfig) -> LatentDataset:
    spec = cfg.dataset
    if spec.kind == "synthetic_gaussian":
        return generate_dataset(spec)
    payload = load_tensors(spec.path)
    for name in ("latents", "labels"):
        if name not in payload.tensors:
            raise ConfigError("dataset.path", f"{spec.path} has no {name!r} tensor")
    latents = payload.tensors["latents"]
    labels = payload.tensors["labels"].reshape(-1)
    if latents.ndim != 4 or tuple(latents.shape[1:]) != tuple(cfg.model.latent):
        raise DimensionError(f"latent file holds {latents.shape}, model expects (N, {cfg.model.latent})")
    if labels.shape[0] != latents.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {latents.shape[0]} latents")
    int_labels = labels.astype(np.int64)
    out_of_range = labels.size and (int_labels.min() < 0 or int_labels.max() >= cfg.model.num_classes)
    if np.any(int_labels != labels) or out_of_range:
        raise LabelError(f"latent file labels must be integers in [0, {cfg.model.num_classes})")
    logger.info("loaded %d latents from %s", latents.shape[0], spec.path)
    return LatentDataset(latents=latents.astype(np.float32), labels=int_labels)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def checkpoint_path(checkpoint_dir: str, step: int) -> Path:
    return Path(checkpoint_dir) / f"step_{step:08d}.mpdt"


def run_training(
    cfg: RunConfig,
    *,
    ckpt: Optional[str] = None,
    deterministic: bool = True,
    progress: bool = False,
    stop_at: Optional[int] = None,
) -> TrainState:
    """Train from scratch or from ``ckpt`` up to ``stop_at`` (default: total_steps).

    Metrics records after the resumed step are dropped first, so the JSONL
    stream of an interrupted-then-resumed run matches an uninterrupted one.
    """
    paths = cfg.resolved_paths()
    tc = cfg.train
    stop = tc.total_steps if stop_at is None else min(stop_at, tc.total_steps)
    dataset = load_dataset(cfg)

    if ckpt is not None:
        state = load_checkpoint(ckpt, cfg)
    else:
        state = init_train_state(cfg.model, tc)
    truncate_metrics(paths.metrics_file, state.step)

    sessions = open_registry(paths.registry)
    text = canonical_text(cfg)
    with sessions() as session:
        run = register_run(session, cfg.run_id, text, cfg.model.name, tc.seed, tc.total_steps)
        producer = BatchProducer(
            dataset, tc.batch_size, tc.seed, state.step, stop, deterministic=deterministic
        )
        bar = tqdm(producer, total=stop, initial=state.step, desc="train", disable=not progress)
        last_loss = None
        try:
            with MetricsWriter(paths.metrics_file) as metrics:
                started = time.perf_counter()
                for step, batch in bar:
                    state, m = train_step(state, batch, tc, cfg.model)
                    last_loss = m.loss
                    if step % tc.log_every == 0 or step == stop:
                        wall_ms = (time.perf_counter() - started) * 1000.0
                        metrics.write(
                            {"step": step, "loss": m.loss, "grad_norm": m.grad_norm, "wall_ms": round(wall_ms, 3)}
                        )
                        bar.set_postfix(loss=f"{m.loss:.4f}")
                        logger.info("step %d loss %.5f grad_norm %.4f", step, m.loss, m.grad_norm)
                        record_progress(session, run, step, m.loss)
                    if step % tc.checkpoint_every == 0 or step == stop:
                        _write_checkpoint(session, run, cfg, state, last_loss)
        except Exception as exc:
            finish_run(session, run, error=str(exc))
            raise
        finally:
            bar.close()
        if state.step >= tc.total_steps:
            finish_run(session, run)

    records = read_metrics(paths.metrics_file)
    out = Path(paths.metrics_file).parent
    write_loss_csv(out / "loss.csv", records)
    write_loss_curve(out / "loss.pgm", records)
    return state


def _write_checkpoint(session, run, cfg: RunConfig, state: TrainState, loss: Optional[float]) -> None:
    paths = cfg.resolved_paths()
    path = save_checkpoint(checkpoint_path(paths.checkpoint_dir, state.step), state, cfg)
    save_checkpoint(Path(paths.checkpoint_dir) / LATEST_CHECKPOINT, state, cfg)
    record_checkpoint(session, run, state.step, str(path), loss)


def cmd_train(
    config_path: str,
    *,
    ckpt: Optional[str] = None,
    seed: Optional[int] = None,
    deterministic: bool = False,
) -> int:
    cfg = load_run_config(config_path, seed=seed)
    deterministic = deterministic_requested(deterministic)
    logger.info(
        "run %s: %s, %d steps, deterministic=%s", cfg.run_id, cfg.model.name, cfg.train.total_steps, deterministic
    )
    state = run_training(cfg, ckpt=ckpt, deterministic=deterministic, progress=True)
    print(f"run {cfg.run_id} finished at step {state.step}")
    print(f"checkpoints: {cfg.resolved_paths().checkpoint_dir}")
    return 0


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def cmd_sample(
    config_path: str,
    *,
    ckpt: Optional[str] = None,
    seed: Optional[int] = None,
) -> int:
    """Sample from the EMA weights (unless ``sample.use_ema`` is false)."""
    cfg = load_run_config(config_path, seed=seed)
    paths = cfg.resolved_paths()
    if ckpt is None:
        ckpt = str(Path(paths.checkpoint_dir) / LATEST_CHECKPOINT)
        if not Path(ckpt).exists():
            raise ConfigError("--ckpt", f"no checkpoint given and {ckpt} does not exist")
    state = load_checkpoint(ckpt, cfg)
    sc = cfg.sample
    model = Mpdit(cfg.model, state.ema if sc.use_ema else state.params)
    classes = sc.classes
    if classes is None:
        classes = tuple(range(min(cfg.model.num_classes, cfg.dataset.num_classes)))
    logger.info(
        "sampling %d x %d latents, %d steps, cfg %.2f, %s weights",
        len(classes), sc.samples_per_class, sc.n_steps, sc.cfg_scale, "EMA" if sc.use_ema else "raw",
    )
    grid = sample_grid(model, classes, sc, cfg.model.latent, progress=True)

    out_dir = Path(paths.output_dir)
    out = save_tensors(
        out_dir / SAMPLES_FILE,
        {"latents": grid.latents, "labels": grid.labels.astype(np.float32)},
        canonical_text(cfg),
    )
    print(f"wrote {grid.latents.shape[0]} latents to {out}")
    if sc.write_pgm:
        written = write_class_grids(out_dir, grid.latents, grid.labels, grid.classes)
        print(f"wrote {len(written)} PGM grids to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def cmd_analyze(
    config_paths: Sequence[str] = (),
    *,
    presets: Sequence[str] = (),
    baseline: Optional[str] = None,
    csv_path: Optional[str] = None,
    attention: str = "finest",
) -> int:
    if attention not in ATTENTION_CONVENTIONS:
        raise ConfigError("--attention", f"must be one of {ATTENTION_CONVENTIONS}")
    configs = [load_run_config(p).model for p in config_paths]
    configs += [get_preset(name) for name in presets]
    if not configs:
        configs = [get_preset(name) for name in ANALYSIS_PRESETS]
    table = report(configs, baseline=baseline, attention=attention)
    print(table.to_text(), end="")
    if csv_path:
        path = Path(csv_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(table.to_csv(), encoding="utf-8")
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(
    config_path: str,
    *,
    seed: Optional[int] = None,
    max_coords: Optional[int] = 8,
    network_coords: Optional[int] = None,
) -> int:
    cfg = load_run_config(config_path, seed=seed)
    results = gradcheck_suite(cfg.model, cfg.train.seed, max_coords=max_coords, network_coords=network_coords)
    for name, err in results.items():
        print(f"{name:<16} {err:.3e}")
    worst = max(results.values())
    print(f"max relative error: {worst:.3e}")
    if worst > GRADCHECK_TOLERANCE:
        raise GradcheckError(worst, GRADCHECK_TOLERANCE)
    return 0
