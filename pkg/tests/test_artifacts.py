"""Tests for harness.artifacts -- metrics stream, loss CSV and PGM output."""

import json

import numpy as np
import pytest

from harness.artifacts import (
    LOSS_CSV_HEADER,
    MetricsWriter,
    latent_grid,
    loss_curve_image,
    normalise_to_u8,
    read_metrics,
    read_pgm,
    truncate_metrics,
    write_class_grids,
    write_loss_csv,
    write_pgm,
)


def _records(n):
    return [{"step": s, "loss": 1.0 / s, "grad_norm": 0.5, "wall_ms": 3.0} for s in range(1, n + 1)]


# ---- Metrics ---------------------------------------------------------------------------


def test_metrics_are_appended_as_sorted_key_json_lines(tmp_path):
    path = tmp_path / "m" / "metrics.jsonl"
    with MetricsWriter(path) as writer:
        writer.write({"step": 1, "loss": 0.5})
    with MetricsWriter(path) as writer:
        writer.write({"step": 2, "loss": 0.25})
    lines = path.read_text().splitlines()
    assert lines[0] == '{"loss": 0.5, "step": 1}'
    assert read_metrics(path) == [{"loss": 0.5, "step": 1}, {"loss": 0.25, "step": 2}]


def test_partial_trailing_record_is_ignored(tmp_path):
    path = tmp_path / "metrics.jsonl"
    path.write_text(json.dumps({"step": 1}) + "\n" + '{"step": 2, "lo')
    assert read_metrics(path) == [{"step": 1}]


def test_missing_metrics_file_reads_empty(tmp_path):
    assert read_metrics(tmp_path / "absent.jsonl") == []
    assert truncate_metrics(tmp_path / "absent.jsonl", 5) == 0


def test_truncate_drops_records_after_step(tmp_path):
    path = tmp_path / "metrics.jsonl"
    with MetricsWriter(path) as writer:
        for record in _records(6):
            writer.write(record)
    assert truncate_metrics(path, 4) == 4
    assert [r["step"] for r in read_metrics(path)] == [1, 2, 3, 4]
    assert not (tmp_path / "metrics.jsonl.tmp").exists()


def test_loss_csv(tmp_path):
    path = write_loss_csv(tmp_path / "loss.csv", _records(3))
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(LOSS_CSV_HEADER)
    assert lines[2] == "2,0.5,0.5"
    assert len(lines) == 4


# ---- Images ------------------------------------------------------------------------------


def test_pgm_round_trip_including_newline_bytes(tmp_path):
    image = np.array([[10, 32, 0], [255, 9, 13]], dtype=np.uint8)
    path = write_pgm(tmp_path / "img.pgm", image)
    assert path.read_bytes().startswith(b"P5\n3 2\n255\n")
    np.testing.assert_array_equal(read_pgm(path), image)


def test_pgm_rejects_non_2d_arrays(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "bad.pgm", np.zeros((2, 2, 2), dtype=np.uint8))


def test_normalise_maps_min_to_zero_and_max_to_255():
    out = normalise_to_u8(np.array([-1.0, 0.0, 1.0]))
    np.testing.assert_array_equal(out, [0, 128, 255])
    np.testing.assert_array_equal(normalise_to_u8(np.full(3, 2.0)), [0, 0, 0])


def test_latent_grid_tiles_channel_zero_with_padding():
    latents = np.zeros((3, 2, 2, 4))
    latents[1, ..., 0] = 1.0
    latents[1, ..., 1] = 50.0  # other channels are ignored
    grid = latent_grid(latents, columns=2)
    assert grid.shape == (5, 5)
    assert grid[0:2, 3:5].min() == 255
    assert grid[0:2, 0:2].max() == 0
    assert grid[2].max() == 0


def test_class_grids_skip_classes_without_samples(tmp_path):
    latents = np.random.default_rng(0).standard_normal((4, 2, 2, 1))
    paths = write_class_grids(tmp_path, latents, np.array([0, 0, 2, 2]), [0, 1, 2])
    assert [p.name for p in paths] == ["class_0000.pgm", "class_0002.pgm"]
    assert read_pgm(paths[0]).shape == (2, 5)


def test_loss_curve_image_marks_one_pixel_per_point():
    image = loss_curve_image([1.0, 0.1, 0.01], width=3, height=3)
    np.testing.assert_array_equal(image == 0, np.eye(3, dtype=bool))
    assert (loss_curve_image([]) == 255).all()
