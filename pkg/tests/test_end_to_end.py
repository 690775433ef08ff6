"""Toy-scale trend checks across the ablation presets."""

from __future__ import annotations

import statistics

import pytest

from conftest import tiny_config
from src.engine.data_domains import load_manifest
from src.engine.eval_report import domain_separability, evaluate
from src.engine.toy_benchmark import build_toy_benchmark
from src.engine.trainer import DomainAdaptationTrainer
from src.engine.vlm_bridge import HashEmbeddingProvider
from src.models.models import AblationMode
from src.telemetry.metrics import MetricsLog

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
# each preset adds one component to the one before it
LADDER = (AblationMode.ADVERSARIAL_ONLY, AblationMode.TOKEN_OFFSET, AblationMode.SKD, AblationMode.FULL)


def _config(manifest_path, mode, seed):
    return tiny_config(
        manifest_path,
        epochs=10,
        batch_size=16,
        seed=seed,
        image_size=32,
        patch_size=8,
        embed_dim=64,
        depth=4,
        num_heads=4,
        alternate_blocks=[0, 1, 2],
        embedding_dim=64,
    ).with_ablation(mode)


@pytest.fixture(scope="module")
def benchmark(tmp_path_factory):
    data = tmp_path_factory.mktemp("trend")
    path = build_toy_benchmark(data, n_source=1000, n_target=1000, seed=0, image_size=32)
    return path, load_manifest(path)


@pytest.fixture(scope="module")
def runs(benchmark, tmp_path_factory):
    """Target accuracy and trained trainer for every (preset, seed)."""
    path, manifest = benchmark
    out = tmp_path_factory.mktemp("runs")
    results = {}
    for seed in SEEDS:
        for mode in AblationMode:
            trainer = DomainAdaptationTrainer(
                _config(path, mode, seed), manifest, HashEmbeddingProvider(d_e=64), metrics=MetricsLog(),
            )
            trainer.fit(out / f"{mode.value}-{seed}")
            results[mode, seed] = (evaluate(trainer.model, manifest).overall_acc, trainer)
    return results


def _median_gain(runs, better, worse) -> float:
    return statistics.median(runs[better, s][0] - runs[worse, s][0] for s in SEEDS)


def test_full_method_beats_adversarial_only(runs):
    assert _median_gain(runs, AblationMode.FULL, AblationMode.ADVERSARIAL_ONLY) >= 0.05


def test_each_added_component_does_not_hurt(runs):
    for worse, better in zip(LADDER, LADDER[1:]):
        assert _median_gain(runs, better, worse) >= 0.0, f"{better.value} vs {worse.value}"


def test_token_offset_beats_input_offset(runs):
    assert _median_gain(runs, AblationMode.TOKEN_OFFSET, AblationMode.INPUT_OFFSET) > 0.0


def test_domain_discriminator_is_driven_toward_chance(benchmark, runs):
    path, manifest = benchmark
    untrained = DomainAdaptationTrainer(
        _config(path, AblationMode.FULL, 0), manifest, HashEmbeddingProvider(d_e=64), metrics=MetricsLog(),
    )
    assert domain_separability(untrained.model, manifest) >= 0.9

    trained = runs[AblationMode.FULL, 0][1]
    assert domain_separability(trained.model, manifest) <= 0.65
