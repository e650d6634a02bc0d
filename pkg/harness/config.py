"""Run configuration: YAML loading, validation, canonical text and run ids.

A run config is a YAML mapping with up to five sections::

    model:   {preset: tiny, hidden_size: 64, ...}   # preset + overrides
    train:   {learning_rate: 1e-3, batch_size: 128, total_steps: 5000, ...}
    sample:  {n_steps: 250, cfg_scale: 1.0, classes: [0, 1], ...}
    dataset: {kind: synthetic_gaussian, sigma: 0.2, ...}
    paths:   {checkpoint_dir: runs/{run_id}/checkpoints, ...}

Unknown keys, wrong types and violated constraints raise ConfigError
naming the dotted field and, when known, the line in the file. The
canonical text is the sorted-key YAML dump of the fully resolved config;
the run id is the first 12 hex digits of its SHA-256. Path templates may
use ``{run_id}``.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from mpdit.backbone import MpditConfig
from mpdit.dataset import DatasetSpec
from mpdit.errors import ConfigError
from mpdit.flow_matching import TrainConfig
from mpdit.presets import get_preset
from mpdit.sampler import SampleConfig

SECTIONS = ("model", "train", "sample", "dataset", "paths")


@dataclass(frozen=True)
class PathsConfig:
    checkpoint_dir: str = "runs/{run_id}/checkpoints"
    metrics_file: str = "runs/{run_id}/metrics.jsonl"
    output_dir: str = "runs/{run_id}/samples"
    registry: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    model: MpditConfig = field(default_factory=MpditConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def run_id(self) -> str:
        return run_id(self)

    def resolved_paths(self) -> PathsConfig:
        rid = self.run_id
        ckpt = self.paths.checkpoint_dir.format(run_id=rid)
        registry = self.paths.registry or str(Path(ckpt) / "runs.db")
        return PathsConfig(
            checkpoint_dir=ckpt,
            metrics_file=self.paths.metrics_file.format(run_id=rid),
            output_dir=self.paths.output_dir.format(run_id=rid),
            registry=registry.format(run_id=rid),
        )


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def load_run_config(path: str | Path, *, seed: int | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError("", f"config file not found: {path}") from None
    return parse_run_config_text(text, source=str(path), seed=seed)


def parse_run_config_text(text: str, *, source: str = "<string>", seed: int | None = None) -> RunConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError("", f"{source}: invalid YAML: {problem}", line=line) from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("", f"{source}: top level must be a mapping")
    try:
        cfg = _build_run_config(data)
        if seed is not None:
            cfg = dataclasses.replace(
                cfg,
                train=dataclasses.replace(cfg.train, seed=seed),
                sample=dataclasses.replace(cfg.sample, seed=seed),
            )
    except ConfigError as exc:
        if exc.line is None and exc.field:
            raise ConfigError(exc.field, exc.message, line=_line_of(root, exc.field)) from None
        raise
    return cfg


def _build_run_config(data: dict) -> RunConfig:
    for key in data:
        if key not in SECTIONS:
            raise ConfigError(str(key), f"unknown section (expected one of {', '.join(SECTIONS)})")
    sections = {name: _section(data, name) for name in SECTIONS}

    model_data = dict(sections["model"])
    preset = model_data.pop("preset", None)
    base = get_preset(preset) if preset is not None else MpditConfig()
    model = _build(MpditConfig, model_data, "model", base)
    model.validate()

    train = _build(TrainConfig, sections["train"], "train", TrainConfig())
    train.validate()

    sample = _build(SampleConfig, sections["sample"], "sample", SampleConfig())
    sample.validate()
    for c in sample.classes or ():
        if not 0 <= c < model.num_classes:
            raise ConfigError("sample.classes", f"class {c} outside [0, {model.num_classes})")

    ds_data = dict(sections["dataset"])
    ds_data.setdefault("latent", list(model.latent))
    ds_data.setdefault("num_classes", model.num_classes)
    dataset = _build(DatasetSpec, ds_data, "dataset", DatasetSpec())
    dataset.validate()
    if dataset.kind == "synthetic_gaussian":
        if tuple(dataset.latent) != tuple(model.latent):
            raise ConfigError("dataset.latent", f"{dataset.latent} does not match model latent {model.latent}")
        if dataset.num_classes > model.num_classes:
            raise ConfigError(
                "dataset.num_classes", f"{dataset.num_classes} exceeds model num_classes {model.num_classes}"
            )

    paths = _build(PathsConfig, sections["paths"], "paths", PathsConfig())
    return RunConfig(model=model, train=train, sample=sample, dataset=dataset, paths=paths)


def _section(data: dict, name: str) -> dict:
    value = data.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(name, "must be a mapping")
    return value


def _build(cls, values: dict, section: str, base):
    known = {f.name: f for f in dataclasses.fields(cls)}
    changes = {}
    for key, value in values.items():
        name = f"{section}.{key}"
        if key not in known:
            raise ConfigError(name, "unknown field")
        changes[key] = _coerce(name, key, value, getattr(base, key))
    return dataclasses.replace(base, **changes)


def _coerce(name: str, key: str, value: Any, default: Any) -> Any:
    if key == "stages":
        if not isinstance(value, list) or not all(
            isinstance(s, list) and len(s) == 2 and all(_is_int(v) for v in s) for s in value
        ):
            raise ConfigError(name, "must be a list of [patch_size, blocks] pairs")
        return tuple((int(p), int(n)) for p, n in value)
    if key == "latent":
        if not isinstance(value, list) or len(value) != 3 or not all(_is_int(v) for v in value):
            raise ConfigError(name, "must be [h, w, d]")
        return tuple(int(v) for v in value)
    if key == "classes":
        if value is None:
            return None
        if not isinstance(value, list) or not all(_is_int(v) for v in value):
            raise ConfigError(name, "must be a list of class indices or null")
        return tuple(int(v) for v in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if not _is_int(value):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if value is not None and not isinstance(value, str):
        raise ConfigError(name, f"expected a string, got {value!r}")
    return value


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _line_of(root, dotted: str) -> Optional[int]:
    node = root
    line = None
    for part in dotted.split("."):
        if not isinstance(node, yaml.MappingNode):
            break
        for key_node, value_node in node.value:
            if key_node.value == part:
                line = key_node.start_mark.line + 1
                node = value_node
                break
        else:
            break
    return line


# ---------------------------------------------------------------------------
# Canonical form
# ---------------------------------------------------------------------------


def _plain(value: Any) -> Any:
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def canonical_text(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=None)


def run_id(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()[:12]


def compatibility_view(cfg: RunConfig) -> dict[str, Any]:
    """Fields a resumed run must share with the run that wrote the checkpoint."""
    view = {f"model.{k}": v for k, v in to_dict(cfg)["model"].items()}
    view.update({f"dataset.{k}": v for k, v in to_dict(cfg)["dataset"].items()})
    view["train.seed"] = cfg.train.seed
    view["train.batch_size"] = cfg.train.batch_size
    return view
