"""Run artifacts: JSONL metrics, loss CSV and PGM images."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LOSS_CSV_HEADER = ("step", "loss", "grad_norm")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


class MetricsWriter:
    """Append-only JSONL writer; every record is flushed and fsynced."""

    def __init__(self, path: str | os.PathLike) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_metrics(path: str | os.PathLike) -> list[dict]:
    path = Path(path)
    if not path.exists():
        return []
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            # a crash can leave one partial trailing record
            break
    return records


def truncate_metrics(path: str | os.PathLike, max_step: int) -> int:
    """Drop records after ``max_step``; returns how many were kept."""
    path = Path(path)
    kept = [r for r in read_metrics(path) if r.get("step", 0) <= max_step]
    if path.exists():
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            for record in kept:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    return len(kept)


def write_loss_csv(path: str | os.PathLike, records: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_CSV_HEADER)
        for r in records:
            writer.writerow([r["step"], repr(float(r["loss"])), repr(float(r["grad_norm"]))])
    return path


# ---------------------------------------------------------------------------
# PGM
# ---------------------------------------------------------------------------


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> Path:
    """Binary (P5) 8-bit grayscale image from a (H, W) uint8 array."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {image.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    return path


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Reads the header layout ``write_pgm`` produces (three newline-terminated lines)."""
    raw = Path(path).read_bytes()
    magic, dims, maxval, data = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    width, height = (int(v) for v in dims.split())
    return np.frombuffer(data, dtype=np.uint8, count=width * height).reshape(height, width)


def normalise_to_u8(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round(255.0 * (values - lo) / (hi - lo)).astype(np.uint8)


def latent_grid(latents: np.ndarray, columns: int, pad: int = 1) -> np.ndarray:
    """Tile channel 0 of (N, h, w, d) latents into one min-max normalised image."""
    n, h, w = latents.shape[:3]
    columns = max(1, min(columns, n))
    rows = -(-n // columns)
    scaled = normalise_to_u8(latents[..., 0])
    canvas = np.zeros((rows * (h + pad) - pad, columns * (w + pad) - pad), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, columns)
        canvas[r * (h + pad) : r * (h + pad) + h, c * (w + pad) : c * (w + pad) + w] = scaled[i]
    return canvas


def write_class_grids(
    out_dir: str | os.PathLike, latents: np.ndarray, labels: np.ndarray, classes: Sequence[int]
) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for c in classes:
        chunk = latents[labels == c]
        if chunk.shape[0] == 0:
            continue
        columns = int(np.ceil(np.sqrt(chunk.shape[0])))
        paths.append(write_pgm(out_dir / f"class_{c:04d}.pgm", latent_grid(chunk, columns)))
    return paths


def loss_curve_image(losses: Sequence[float], width: int = 256, height: int = 128) -> np.ndarray:
    """White background, one dark pixel column per x bucket; log-scaled y."""
    image = np.full((height, width), 255, dtype=np.uint8)
    losses = np.asarray(losses, dtype=np.float64)
    losses = losses[np.isfinite(losses) & (losses > 0)]
    if losses.size == 0:
        return image
    ys = np.log10(losses)
    lo, hi = ys.min(), ys.max()
    span = hi - lo if hi > lo else 1.0
    xs = np.linspace(0, width - 1, losses.size).round().astype(int)
    rows = ((hi - ys) / span * (height - 1)).round().astype(int)
    image[rows, xs] = 0
    return image


def write_loss_curve(path: str | os.PathLike, records: Sequence[dict]) -> Path:
    return write_pgm(path, loss_curve_image([r["loss"] for r in records]))
