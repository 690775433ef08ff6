"""
Target-domain Evaluation & Run Comparison
─────────────────────────────────────────
Overall (micro), macro, per-class and per-weather accuracy on held-out
target labels, plus side-by-side comparison tables across runs.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from jinja2 import Environment, FileSystemLoader
from sklearn.metrics import confusion_matrix

from src.engine.data_domains import DomainManifest, ImageLoader
from src.engine.model_core import AdaptationModel, DomainDiscriminator
from src.models.models import WeatherCondition
from src.models.schemas import EvalResult

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"


# ── evaluation ────────────────────────────────────────────────────────

def predict_target(
    model: AdaptationModel,
    manifest: DomainManifest,
    loader: Optional[ImageLoader] = None,
    batch_size: int = 64,
    device: str = "cpu",
) -> pd.DataFrame:
    """One row per labelled target record: id, weather, label, prediction, confidence.

    Raises ``ValueError`` if any target record has no evaluation label.
    """
    labels = manifest.evaluation_labels()
    records = sorted(manifest.target_records, key=lambda r: r.id)
    unlabeled = [r.id for r in records if r.id not in labels]
    if unlabeled:
        raise ValueError(f"unlabeled evaluation record(s): {unlabeled[:5]}")
    if not records:
        raise ValueError("manifest has no target records to evaluate")

    loader = loader or ImageLoader(manifest.base_dir, model.feature_extractor.image_size[0])
    model = model.to(device)
    predictions: list[int] = []
    confidences: list[float] = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        probs = model.predict(loader.batch(chunk).to(device)).cpu()
        conf, pred = probs.max(dim=-1)
        predictions.extend(pred.tolist())
        confidences.extend(conf.tolist())

    return pd.DataFrame({
        "id": [r.id for r in records],
        "weather": [r.weather.value if r.weather else None for r in records],
        "label": [labels[r.id] for r in records],
        "prediction": predictions,
        "confidence": confidences,
    })


def summarize(frame: pd.DataFrame, label_space: Sequence[str]) -> EvalResult:
    """Build an ``EvalResult`` from a predictions frame."""
    k = len(label_space)
    n_eval = len(frame)
    if n_eval == 0:
        raise ValueError("no predictions to summarise")
    conf = confusion_matrix(frame["label"], frame["prediction"], labels=list(range(k)))
    class_counts = conf.sum(axis=1)

    per_class = {
        name: (float(conf[i, i] / class_counts[i]) if class_counts[i] else None)
        for i, name in enumerate(label_space)
    }
    observed = [v for v in per_class.values() if v is not None]

    correct = frame["label"] == frame["prediction"]
    by_weather = correct.groupby(frame["weather"]).agg(["mean", "size"])
    per_weather: dict[str, Optional[float]] = {}
    weather_counts: dict[str, int] = {}
    for w in WeatherCondition:
        if w.value in by_weather.index:
            per_weather[w.value] = float(by_weather.loc[w.value, "mean"])
            weather_counts[w.value] = int(by_weather.loc[w.value, "size"])
        else:
            per_weather[w.value] = None
            weather_counts[w.value] = 0

    return EvalResult(
        label_space=list(label_space),
        overall_acc=float(np.trace(conf) / n_eval),
        macro_acc=float(np.mean(observed)) if observed else 0.0,
        per_class=per_class,
        per_weather=per_weather,
        class_counts={name: int(class_counts[i]) for i, name in enumerate(label_space)},
        weather_counts=weather_counts,
        confusion=conf.astype(int).tolist(),
        n_eval=n_eval,
    )


@torch.no_grad()
def evaluate(
    model: AdaptationModel,
    manifest: DomainManifest,
    loader: Optional[ImageLoader] = None,
    batch_size: int = 64,
    device: str = "cpu",
    predictions_path: Optional[str | Path] = None,
) -> EvalResult:
    """Deterministic evaluation on the target records' held-out labels (F → G → C, dropout off)."""
    frame = predict_target(model, manifest, loader, batch_size, device)
    if predictions_path is not None:
        out = frame.assign(
            label=[manifest.label_space[i] for i in frame["label"]],
            prediction=[manifest.label_space[i] for i in frame["prediction"]],
        )
        Path(predictions_path).parent.mkdir(parents=True, exist_ok=True)
        out.to_csv(predictions_path, index=False)
    result = summarize(frame, manifest.label_space)
    logger.info("Evaluated %d target records: overall=%.4f macro=%.4f", result.n_eval, result.overall_acc, result.macro_acc)
    return result


def write_result(result: EvalResult, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(result.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def load_result(path: str | Path) -> EvalResult:
    return EvalResult.model_validate_json(Path(path).read_text(encoding="utf-8"))


# ── domain separability ───────────────────────────────────────────────

FeatureFn = Callable[[torch.Tensor], torch.Tensor]


@torch.no_grad()
def _frozen_features(extract: FeatureFn, loader: ImageLoader, records, batch_size: int, device: str) -> torch.Tensor:
    chunks = [
        extract(loader.batch(records[start:start + batch_size]).to(device)).float().cpu()
        for start in range(0, len(records), batch_size)
    ]
    return torch.cat(chunks)


def domain_separability(
    model: AdaptationModel,
    manifest: DomainManifest,
    loader: Optional[ImageLoader] = None,
    steps: int = 300,
    learning_rate: float = 1e-3,
    seed: int = 0,
    batch_size: int = 64,
    device: str = "cpu",
    extract: Optional[FeatureFn] = None,
) -> float:
    """Held-out accuracy of a fresh domain discriminator on frozen features.

    Equal numbers of source and target records are drawn and split in half;
    the discriminator is fit on one half and scored on the other, so 0.5 is
    chance. The global torch RNG is left untouched.
    """
    per_domain = min(manifest.n_s, manifest.n_t)
    if per_domain < 2:
        raise ValueError("domain separability needs at least two records per domain")
    loader = loader or ImageLoader(manifest.base_dir, model.feature_extractor.image_size[0])
    if extract is None:
        def extract(images: torch.Tensor) -> torch.Tensor:
            return model.feature_extractor(images).final_feature

    gen = torch.Generator().manual_seed(seed)
    picked = []
    for records in (manifest.source_records, manifest.target_records):
        ordered = sorted(records, key=lambda r: r.id)
        picked.append([ordered[i] for i in torch.randperm(len(ordered), generator=gen)[:per_domain].tolist()])
    half = per_domain // 2
    train_records = picked[0][:half] + picked[1][:half]
    test_records = picked[0][half:] + picked[1][half:]
    train_y = torch.tensor([0] * half + [1] * half)
    test_y = torch.tensor([0] * (per_domain - half) + [1] * (per_domain - half))

    was_training = model.training
    model.eval()
    try:
        train_x = _frozen_features(extract, loader, train_records, batch_size, device)
        test_x = _frozen_features(extract, loader, test_records, batch_size, device)
    finally:
        model.train(was_training)
    mean, std = train_x.mean(dim=0), train_x.std(dim=0).clamp_min(1e-6)
    train_x, test_x = (train_x - mean) / std, (test_x - mean) / std

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        classifier = DomainDiscriminator(train_x.shape[1])
        optimizer = torch.optim.Adam(classifier.parameters(), lr=learning_rate)
        for _ in range(steps):
            optimizer.zero_grad()
            F.cross_entropy(classifier.net(train_x), train_y).backward()
            optimizer.step()
    with torch.no_grad():
        accuracy = float((classifier.net(test_x).argmax(dim=-1) == test_y).float().mean())
    logger.info("Domain separability: %.3f held-out accuracy on %d records", accuracy, len(test_records))
    return accuracy


# ── comparison ────────────────────────────────────────────────────────

def compare_runs(results: Sequence[tuple[str, EvalResult]]) -> pd.DataFrame:
    """Side-by-side accuracies with ``delta_<name>`` columns against the first run.

    Rows are grouped as ``overall`` (micro, macro), ``class`` and ``weather``;
    value columns follow the order of *results*.
    """
    if not results:
        raise ValueError("compare_runs needs at least one result")
    names = [name for name, _ in results]
    if len(set(names)) != len(names):
        raise ValueError(f"run names must be unique: {names}")
    label_space = results[0][1].label_space
    for name, result in results[1:]:
        if result.label_space != label_space:
            raise ValueError(f"run '{name}' has a different label space than '{names[0]}'")

    index = (
        [("overall", "micro"), ("overall", "macro")]
        + [("class", c) for c in label_space]
        + [("weather", w.value) for w in WeatherCondition]
    )
    columns = {}
    for name, r in results:
        values = {("overall", "micro"): r.overall_acc, ("overall", "macro"): r.macro_acc}
        values.update({("class", c): r.per_class.get(c) for c in label_space})
        values.update({("weather", w.value): r.per_weather.get(w.value) for w in WeatherCondition})
        columns[name] = [values[key] for key in index]

    table = pd.DataFrame(columns, index=pd.MultiIndex.from_tuples(index, names=["group", "key"]), dtype=float)
    baseline = names[0]
    for name in names[1:]:
        table[f"delta_{name}"] = table[name] - table[baseline]
    return table.reset_index()


def render_markdown(table: pd.DataFrame, title: str = "Run comparison") -> str:
    env = Environment(loader=FileSystemLoader(TEMPLATE_DIR), keep_trailing_newline=True)
    template = env.get_template("comparison.md.j2")
    value_columns = [c for c in table.columns if c not in ("group", "key")]

    def fmt(value: float) -> str:
        return "n/a" if pd.isna(value) else f"{value:.4f}"

    rows = [
        {"group": row["group"], "key": row["key"], "cells": [fmt(row[c]) for c in value_columns]}
        for _, row in table.iterrows()
    ]
    return template.render(title=title, columns=value_columns, rows=rows)


def write_comparison(table: pd.DataFrame, out_dir: str | Path, stem: str = "comparison") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    md_path = out_dir / f"{stem}.md"
    table.to_csv(csv_path, index=False, float_format="%.6f")
    md_path.write_text(render_markdown(table), encoding="utf-8")
    return csv_path, md_path
