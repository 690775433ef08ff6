from __future__ import annotations

from pathlib import Path

import pytest
import torch

from src.config.settings import settings
from src.engine.data_domains import DomainManifest, load_manifest
from src.engine.toy_benchmark import build_toy_benchmark
from src.engine.vlm_bridge import HashEmbeddingProvider
from src.models.models import DomainTag, WeatherCondition
from src.models.schemas import SampleRecord, TrainConfig

TINY_D_E = 16


@pytest.fixture(autouse=True)
def _quiet_progress(monkeypatch):
    monkeypatch.setattr(settings, "PROGRESS_BAR", False)


def make_source(rid: str, label: int, weather: str = "sunny", quality: float | None = 1.0) -> SampleRecord:
    return SampleRecord(
        id=rid,
        image_ref=f"{rid}.png",
        class_label=label,
        weather=WeatherCondition(weather),
        prior_quality=quality,
        domain=DomainTag.SOURCE,
    )


def make_target(rid: str, weather: str | None = "foggy") -> SampleRecord:
    return SampleRecord(
        id=rid,
        image_ref=f"{rid}.png",
        weather=WeatherCondition(weather) if weather else None,
        domain=DomainTag.TARGET,
    )


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("toy")
    build_toy_benchmark(out, n_source=40, n_target=30, seed=0, image_size=16)
    return out


@pytest.fixture
def toy_manifest(toy_dir) -> DomainManifest:
    return load_manifest(toy_dir / "manifest.jsonl")


@pytest.fixture
def stub_provider() -> HashEmbeddingProvider:
    return HashEmbeddingProvider(d_e=TINY_D_E)


def tiny_config(manifest_path: Path, **overrides) -> TrainConfig:
    values = dict(
        manifest=manifest_path,
        epochs=2,
        batch_size=8,
        seed=0,
        backbone="custom",
        pretrained=False,
        image_size=16,
        patch_size=8,
        embed_dim=32,
        depth=2,
        num_heads=2,
        alternate_blocks=[0, 1],
        provider="hash",
        embedding_dim=TINY_D_E,
        device="cpu",
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture
def config(toy_dir) -> TrainConfig:
    return tiny_config(toy_dir / "manifest.jsonl")


@pytest.fixture
def probs_factory():
    def make(rows: int, k: int, seed: int = 0) -> torch.Tensor:
        gen = torch.Generator().manual_seed(seed)
        return torch.randn(rows, k, generator=gen).softmax(dim=-1)

    return make
