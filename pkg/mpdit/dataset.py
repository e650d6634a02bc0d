"""Synthetic latent datasets and the training batch producer.

The synthetic dataset stands in for VAE latents: class c draws
``z = mu_c + sigma * eps`` where ``mu_c`` is a fixed pattern with entries
in [-1, 1] derived from ``(mean_seed, c)``.

The batch for training step s is a pure function of ``(seed, s)``, so a
resumed run sees exactly the batches an uninterrupted run would.
"""

from __future__ import annotations

import logging
import queue
import threading
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from mpdit.errors import ConfigError
from mpdit.tensor import Rng

logger = logging.getLogger(__name__)

DATASET_KINDS = ("synthetic_gaussian", "latent_file")

# Stream keys for Rng.fork; fixed so streams never collide.
_MEANS_STREAM = 0
_SAMPLES_STREAM = 1
_BATCH_STREAM = 2


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic_gaussian"
    num_classes: int = 10
    latent: tuple[int, int, int] = (8, 8, 4)
    sigma: float = 0.2
    mean_seed: int = 0
    n_per_class: int = 1000
    seed: int = 0
    path: str | None = None

    def validate(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError("dataset.kind", f"must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.kind == "latent_file":
            if not self.path:
                raise ConfigError("dataset.path", "latent_file datasets need a path")
            return
        if self.num_classes < 1:
            raise ConfigError("dataset.num_classes", f"must be >= 1, got {self.num_classes}")
        if not self.sigma > 0:
            raise ConfigError("dataset.sigma", f"must be > 0, got {self.sigma}")
        if len(self.latent) != 3 or min(self.latent) < 1:
            raise ConfigError("dataset.latent", f"must be (h, w, d) of positive ints, got {self.latent}")
        if self.n_per_class < 0:
            raise ConfigError("dataset.n_per_class", f"must be >= 0, got {self.n_per_class}")


@dataclass
class LatentDataset:
    latents: np.ndarray  # (N, h, w, d) float32
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return self.latents.shape[0]


@dataclass
class Batch:
    latents: np.ndarray
    labels: np.ndarray


def class_means(spec: DatasetSpec) -> np.ndarray:
    """(C, h, w, d) float64 class means, entries in [-1, 1]."""
    root = Rng(spec.mean_seed).fork(_MEANS_STREAM)
    return np.stack(
        [root.fork(c).uniform(spec.latent, -1.0, 1.0, dtype=np.float64) for c in range(spec.num_classes)]
    )


def generate_dataset(spec: DatasetSpec, n_per_class: int | None = None, seed: int | None = None) -> LatentDataset:
    """Draw ``n_per_class`` latents for every class, grouped by class."""
    spec.validate()
    if spec.kind != "synthetic_gaussian":
        raise ConfigError("dataset.kind", "latent_file datasets are loaded from disk, not generated")
    n = spec.n_per_class if n_per_class is None else n_per_class
    if n < 0:
        raise ConfigError("dataset.n_per_class", f"must be >= 0, got {n}")
    root = Rng(spec.seed if seed is None else seed).fork(_SAMPLES_STREAM)
    means = class_means(spec)
    latents = [
        means[c] + spec.sigma * root.fork(c).normal((n, *spec.latent), dtype=np.float64)
        for c in range(spec.num_classes)
    ]
    return LatentDataset(
        latents=np.concatenate(latents).astype(np.float32).reshape(-1, *spec.latent),
        labels=np.repeat(np.arange(spec.num_classes, dtype=np.int64), n),
    )


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


def batch_for_step(dataset: LatentDataset, batch_size: int, seed: int, step: int) -> Batch:
    idx = Rng(seed).fork(_BATCH_STREAM, step).integers(0, len(dataset), batch_size)
    return Batch(latents=dataset.latents[idx], labels=dataset.labels[idx])


class BatchProducer:
    """Yields ``(step, batch)`` for steps ``start + 1 .. stop``.

    In threaded mode a worker fills a bounded queue ahead of the training
    loop; deterministic mode builds each batch inline. Both produce the same
    batches.
    """

    def __init__(
        self,
        dataset: LatentDataset,
        batch_size: int,
        seed: int,
        start: int,
        stop: int,
        *,
        deterministic: bool = True,
        queue_size: int = 4,
    ) -> None:
        if len(dataset) == 0 and stop > start:
            raise ConfigError("dataset", "cannot train on an empty dataset")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.start = start
        self.stop = stop
        self.deterministic = deterministic
        self._queue: queue.Queue = queue.Queue(maxsize=queue_size)
        self._closed = threading.Event()
        self._worker: threading.Thread | None = None

    def _make(self, step: int) -> Batch:
        return batch_for_step(self.dataset, self.batch_size, self.seed, step)

    def _fill(self) -> None:
        try:
            for step in range(self.start + 1, self.stop + 1):
                item = (step, self._make(step))
                while not self._closed.is_set():
                    try:
                        self._queue.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if self._closed.is_set():
                    return
        except Exception as exc:  # surfaced on the consumer side
            self._queue.put(exc)

    def __iter__(self) -> Iterator[tuple[int, Batch]]:
        if self.deterministic:
            for step in range(self.start + 1, self.stop + 1):
                yield step, self._make(step)
            return
        self._worker = threading.Thread(target=self._fill, name="batch-producer", daemon=True)
        self._worker.start()
        try:
            for _ in range(self.start + 1, self.stop + 1):
                item = self._queue.get()
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            self.close()

    def close(self) -> None:
        self._closed.set()
        if self._worker is not None:
            self._worker.join(timeout=1.0)
            self._worker = None
