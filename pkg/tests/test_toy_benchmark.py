from __future__ import annotations

import pytest
import torch

from src.engine.data_domains import load_manifest
from src.engine.toy_benchmark import TOY_CLASSES, build_toy_benchmark, long_tail_counts, render_shape
from src.models.models import WeatherCondition


def test_long_tail_counts_sum_and_decay():
    counts = long_tail_counts(1000, 5, 10.0)
    assert sum(counts) == 1000
    assert counts == sorted(counts, reverse=True)
    assert counts[0] / counts[-1] == pytest.approx(10.0, rel=0.15)


def test_long_tail_needs_one_per_class():
    with pytest.raises(ValueError):
        long_tail_counts(3, 5, 10.0)


@pytest.mark.parametrize("shape", TOY_CLASSES)
def test_shapes_render_in_unit_range(shape):
    img = render_shape(shape, 32, torch.Generator().manual_seed(0))
    assert img.shape == (3, 32, 32)
    assert 0.0 <= float(img.min()) and float(img.max()) <= 1.0


def test_benchmark_is_deterministic_per_seed(tmp_path):
    a = build_toy_benchmark(tmp_path / "a", n_source=20, n_target=15, seed=4, image_size=16)
    b = build_toy_benchmark(tmp_path / "b", n_source=20, n_target=15, seed=4, image_size=16)
    assert a.read_text() == b.read_text()
    assert torch.equal(torch.load(tmp_path / "a" / "images.pt"), torch.load(tmp_path / "b" / "images.pt"))


def test_benchmark_manifest_shape(toy_manifest):
    assert toy_manifest.label_space == TOY_CLASSES
    assert toy_manifest.n_s == 40 and toy_manifest.n_t == 30
    assert {r.weather for r in toy_manifest.source_records} == set(WeatherCondition)
    assert all(r.prior_quality is not None for r in toy_manifest.source_records)
    assert len(toy_manifest.evaluation_labels()) == toy_manifest.n_t
    assert load_manifest(toy_manifest.base_dir / "manifest.jsonl").n_t == 30
