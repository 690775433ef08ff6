from __future__ import annotations

import json
from pathlib import Path

import pytest

import main
from src.engine.data_domains import load_manifest
from src.models.models import DomainTag

CONFIG = """\
MANIFEST={manifest}
EPOCHS=1
BATCH_SIZE=8
BACKBONE=custom
PRETRAINED=false
IMAGE_SIZE=16
PATCH_SIZE=8
EMBED_DIM=32
DEPTH=2
NUM_HEADS=2
ALTERNATE_BLOCKS=0,1
PROVIDER=hash
EMBEDDING_DIM=16
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("cli")
    code = main.main([
        "prepare-manifest", "--toy", "--n-source", "40", "--n-target", "30",
        "--image-size", "16", "--seed", "1", "--out-dir", str(root / "data"),
    ])
    assert code == 0
    (root / "toy.cfg").write_text(CONFIG.format(manifest="data/manifest.jsonl"), encoding="utf-8")
    return root


@pytest.fixture(scope="module")
def trained(workspace) -> Path:
    out = workspace / "run"
    code = main.main(["train", "--config", str(workspace / "toy.cfg"), "--seed", "7", "--out-dir", str(out)])
    assert code == 0
    return out


def _invocation(out: Path) -> dict:
    return json.loads((out / "invocation.json").read_text())


def test_prepare_manifest_writes_summary(workspace):
    summary = json.loads((workspace / "data" / "manifest_summary.json").read_text())
    assert summary["n_source"] == 40 and summary["n_target"] == 30
    assert summary["source"]["imbalance_ratio"] == 1.0
    assert _invocation(workspace / "data")["command"] == "prepare-manifest"


def test_train_without_config_is_a_usage_error(tmp_path):
    assert main.main(["train", "--out-dir", str(tmp_path)]) == 2


def test_train_with_missing_manifest(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(CONFIG.format(manifest="nowhere.jsonl"), encoding="utf-8")
    assert main.main(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "out")]) == 2


def test_invalid_override_is_a_config_error(workspace, tmp_path):
    code = main.main(["train", "--config", str(workspace / "toy.cfg"), "--set", "epochs=0", "--out-dir", str(tmp_path)])
    assert code == 2


def test_train_records_invocation_and_metrics(trained):
    record = _invocation(trained)
    assert record["seed"] == 7
    assert set(record["seeds"]) == {"data", "perturbation", "omega", "dropout", "init"}
    assert record["config"]["epochs"] == 1
    assert (trained / "final.pt").is_file()
    lines = (trained / "metrics.jsonl").read_text().splitlines()
    assert any(json.loads(line)["channel"] == "step" for line in lines)


def test_same_seed_gives_byte_identical_metrics(workspace, trained):
    again = workspace / "run-again"
    assert main.main(["train", "--config", str(workspace / "toy.cfg"), "--seed", "7", "--out-dir", str(again)]) == 0
    assert (again / "metrics.jsonl").read_bytes() == (trained / "metrics.jsonl").read_bytes()


def test_ablation_flag_is_echoed(workspace):
    config = main.resolve_config(str(workspace / "toy.cfg"), ablation="adversarial-only")
    assert not (config.use_skd or config.use_token_offset or config.use_input_offset or config.use_curriculum)
    assert config.manifest == workspace / "data" / "manifest.jsonl"


def test_evaluate_is_repeatable(workspace, trained, tmp_path):
    args = ["evaluate", "--checkpoint", str(trained / "final.pt"), "--manifest", str(workspace / "data" / "manifest.jsonl")]
    assert main.main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main.main(args + ["--out-dir", str(tmp_path / "b")]) == 0

    first = (tmp_path / "a" / "results.json").read_text()
    assert first == (tmp_path / "b" / "results.json").read_text()
    result = json.loads(first)
    assert {"overall_acc", "per_class", "per_weather"} <= set(result)
    assert (tmp_path / "a" / "predictions.csv").is_file()


def test_corrupt_checkpoint_exits_with_runtime_error(workspace, tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"corrupt")
    code = main.main([
        "evaluate", "--checkpoint", str(bad), "--manifest", str(workspace / "data" / "manifest.jsonl"),
        "--out-dir", str(tmp_path / "out"),
    ])
    assert code == 1


def test_score_prior_writes_weighted_copy(workspace, tmp_path):
    src = workspace / "data" / "manifest.jsonl"
    before = src.read_bytes()
    out = tmp_path / "scored.jsonl"
    assert main.main(["score-prior", "--manifest", str(src), "--out", str(out)]) == 0

    assert src.read_bytes() == before
    scored = load_manifest(out)
    for rec in scored.source_records:
        if rec.weather.value == "sunny":
            assert rec.prior_score == pytest.approx(rec.prior_quality)
        assert rec.prior_score <= rec.prior_quality + 1e-12
    assert len(scored.records_for(DomainTag.TARGET)) == 30


def test_score_prior_keeps_the_data_directory_invocation(workspace):
    data = workspace / "data"
    out = data / "scored.jsonl"
    assert main.main(["score-prior", "--manifest", str(data / "manifest.jsonl"), "--out", str(out)]) == 0

    assert _invocation(data)["command"] == "prepare-manifest"
    scored = json.loads((data / "scored.invocation.json").read_text())
    assert scored["command"] == "score-prior"


def test_score_prior_without_quality_or_provider(tmp_path):
    manifest = tmp_path / "m.jsonl"
    manifest.write_text("\n".join([
        json.dumps({"label_space": ["a"]}),
        json.dumps({"id": "s1", "image": "x.png", "domain": "source", "class": "a", "weather": "sunny"}),
    ]) + "\n", encoding="utf-8")
    assert main.main(["score-prior", "--manifest", str(manifest)]) == 2


def test_report_compares_runs(workspace, trained, tmp_path):
    args = ["evaluate", "--checkpoint", str(trained / "final.pt"), "--manifest", str(workspace / "data" / "manifest.jsonl")]
    assert main.main(args + ["--out-dir", str(tmp_path / "eval")]) == 0
    results = str(tmp_path / "eval" / "results.json")

    code = main.main([
        "report", "--results", f"base={results}", "--results", f"again={results}", "--out-dir", str(tmp_path / "report"),
    ])
    assert code == 0
    assert (tmp_path / "report" / "comparison.csv").is_file()
    assert "delta_again" in (tmp_path / "report" / "comparison.md").read_text()
