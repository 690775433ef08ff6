from __future__ import annotations

import json
from collections import Counter

import pytest
import torch

from conftest import make_source, make_target
from src.engine.data_domains import (
    DomainManifest,
    ImageLoader,
    MixedBatchSampler,
    class_histogram,
    imbalance_ratio,
    load_manifest,
    sample_mixed_batch,
    split_batch_size,
    write_manifest,
)
from src.engine.errors import ManifestError
from src.models.models import DomainTag


def _write(path, header, rows):
    lines = [json.dumps(header)] + [json.dumps(r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


HEADER = {
    "manifest_version": 1,
    "label_space": ["boat", "buoy", "tug"],
    "weather_tags": ["sunny", "cloudy", "foggy", "rainstorm", "sunset_night"],
}


def test_load_manifest_quarantines_target_labels(tmp_path):
    path = _write(tmp_path / "m.jsonl", HEADER, [
        {"id": "s1", "image": "a.png", "domain": "source", "class": "boat", "weather": "sunny", "prior_quality": 0.9},
        {"id": "t1", "image": "b.png", "domain": "target", "class": "tug", "weather": "foggy"},
        {"id": "t2", "image": "c.png", "domain": "target", "weather": " Sunset_Night"},
    ])
    manifest = load_manifest(path)

    assert manifest.n_s == 1 and manifest.n_t == 2
    assert all(r.class_label is None for r in manifest.target_records)
    assert manifest.evaluation_labels() == {"t1": 2}
    assert manifest.record("t2").weather.value == "sunset_night"


def test_unknown_weather_names_row_and_field(tmp_path):
    path = _write(tmp_path / "m.jsonl", HEADER, [
        {"id": "s1", "image": "a.png", "domain": "source", "class": "boat", "weather": "sunny"},
        {"id": "s2", "image": "a.png", "domain": "source", "class": "boat", "weather": "hail"},
    ])
    with pytest.raises(ManifestError) as err:
        load_manifest(path)
    assert err.value.row == 2
    assert err.value.field == "weather"


def test_source_without_class_is_rejected(tmp_path):
    path = _write(tmp_path / "m.jsonl", HEADER, [
        {"id": "s1", "image": "a.png", "domain": "source", "weather": "sunny"},
    ])
    with pytest.raises(ManifestError, match="source record requires class"):
        load_manifest(path)


def test_class_outside_label_space(tmp_path):
    path = _write(tmp_path / "m.jsonl", HEADER, [
        {"id": "s1", "image": "a.png", "domain": "source", "class": "whale", "weather": "sunny"},
    ])
    with pytest.raises(ManifestError) as err:
        load_manifest(path)
    assert err.value.field == "class"


def test_missing_manifest_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "absent.jsonl")


def test_written_manifest_reloads_identically(toy_manifest, tmp_path):
    path = write_manifest(toy_manifest, tmp_path / "copy.jsonl")
    again = load_manifest(path)
    assert again.records == toy_manifest.records
    assert again.evaluation_labels() == toy_manifest.evaluation_labels()


def test_histogram_reports_absent_classes_as_zero():
    records = [make_source("a", 0), make_source("b", 0), make_source("c", 2), make_target("t")]
    manifest = DomainManifest(records, ["x", "y", "z"])
    assert class_histogram(manifest, DomainTag.SOURCE) == {0: 2, 1: 0, 2: 1}
    assert class_histogram(manifest, DomainTag.TARGET) == {0: 0, 1: 0, 2: 0}
    assert imbalance_ratio({0: 10, 1: 0, 2: 2}) == 5.0


def test_toy_target_is_long_tailed(toy_manifest):
    hist = class_histogram(toy_manifest, DomainTag.TARGET)
    assert sum(hist.values()) == toy_manifest.n_t
    assert hist[0] > hist[4]
    assert imbalance_ratio(class_histogram(toy_manifest, DomainTag.SOURCE)) == 1.0


@pytest.mark.parametrize("batch_size,expected", [(16, (8, 8)), (7, (4, 3)), (2, (1, 1))])
def test_split_batch_size(batch_size, expected):
    assert split_batch_size(batch_size) == expected


def test_mixed_batch_draws_only_active_sources(toy_manifest):
    active = set(toy_manifest.source_ids[:3])
    batch = sample_mixed_batch(toy_manifest, active, 16, rng=0)
    assert batch.n_source == 8 and batch.n_target == 8
    assert {r.id for r in batch.source_items} <= active
    assert all(r.domain is DomainTag.TARGET for r in batch.target_items)


def test_mixed_batch_rejects_empty_active_set(toy_manifest):
    with pytest.raises(ValueError):
        sample_mixed_batch(toy_manifest, set(), 16, rng=0)


def test_epoch_covers_active_subset_in_ceil_steps(toy_manifest):
    sampler = MixedBatchSampler(toy_manifest, 8, torch.Generator().manual_seed(1))
    active = toy_manifest.source_ids[:10]
    batches = list(sampler.epoch(active))

    assert len(batches) == sampler.steps_per_epoch(10) == 3
    seen = Counter(r.id for b in batches for r in b.source_items)
    assert set(seen) == set(active)
    assert all(b.n_source == 4 and b.n_target == 4 for b in batches)


def test_sampler_state_round_trip(toy_manifest):
    a = MixedBatchSampler(toy_manifest, 8, torch.Generator().manual_seed(3))
    list(a.epoch(toy_manifest.source_ids))
    state = a.state_dict()
    expected = [b.ids for b in a.epoch(toy_manifest.source_ids)]

    b = MixedBatchSampler(toy_manifest, 8, torch.Generator().manual_seed(99))
    b.load_state_dict(state)
    assert [batch.ids for batch in b.epoch(toy_manifest.source_ids)] == expected


def test_image_loader_reads_bundle(toy_manifest):
    loader = ImageLoader(toy_manifest.base_dir, image_size=16)
    images = loader.batch(toy_manifest.source_records[:4])
    assert images.shape == (4, 3, 16, 16)
    assert float(images.min()) >= 0.0 and float(images.max()) <= 1.0
