"""
Synthetic Two-Domain Benchmark
──────────────────────────────
Five rendered shapes on small canvases.  The source domain is class-balanced
and carries one of the five weather corruptions per image, with a
severity-derived ``prior_quality``.  The target domain is long-tailed and uses
a different corruption family and palette; its labels are written for
evaluation only.

Images are stored as one ``uint8`` tensor bundle (``images.pt``) referenced
from the manifest as ``"images.pt#<index>"``.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import torch
import torch.nn.functional as F

from src.engine.data_domains import DomainManifest, write_manifest
from src.models.models import DomainTag, WeatherCondition
from src.models.schemas import SampleRecord

logger = logging.getLogger(__name__)

TOY_CLASSES = ("circle", "square", "triangle", "cross", "ring")
BUNDLE_NAME = "images.pt"
MANIFEST_NAME = "manifest.jsonl"


# ── shapes ────────────────────────────────────────────────────────────

def _shape_mask(shape: str, size: int, cx: float, cy: float, r: float) -> torch.Tensor:
    coords = torch.linspace(-1.0, 1.0, size)
    y, x = torch.meshgrid(coords - cy, coords - cx, indexing="ij")
    if shape == "circle":
        return (x ** 2 + y ** 2) <= r ** 2
    if shape == "square":
        return torch.maximum(x.abs(), y.abs()) <= r * 0.85
    if shape == "triangle":
        return (y <= r * 0.8) & (y >= 2.0 * x.abs() - r)
    if shape == "cross":
        arm = r / 3.0
        return ((x.abs() <= arm) & (y.abs() <= r)) | ((y.abs() <= arm) & (x.abs() <= r))
    if shape == "ring":
        dist = (x ** 2 + y ** 2).sqrt()
        return (dist <= r) & (dist >= r * 0.55)
    raise ValueError(f"unknown shape '{shape}'")


def _uniform(gen: torch.Generator, lo: float, hi: float, *shape: int) -> torch.Tensor:
    return lo + (hi - lo) * torch.rand(shape or (1,), generator=gen)


def render_shape(shape: str, size: int, gen: torch.Generator, target: bool = False) -> torch.Tensor:
    """One ``3 x size x size`` float image in [0, 1]."""
    scale = (0.35, 0.6) if target else (0.5, 0.8)
    r = float(_uniform(gen, *scale))
    cx, cy = (float(v) for v in _uniform(gen, -0.2, 0.2, 2))
    mask = _shape_mask(shape, size, cx, cy, r).float()
    if target:
        background = _uniform(gen, 0.35, 0.65, 3)
        foreground = _uniform(gen, 0.0, 0.3, 3)
    else:
        background = _uniform(gen, 0.0, 0.25, 3)
        foreground = _uniform(gen, 0.6, 1.0, 3)
    return background[:, None, None] * (1 - mask) + foreground[:, None, None] * mask


# ── corruptions ───────────────────────────────────────────────────────

def _blur(img: torch.Tensor, k: int = 3) -> torch.Tensor:
    return F.avg_pool2d(img.unsqueeze(0), k, stride=1, padding=k // 2, count_include_pad=False)[0]


def source_weather(img: torch.Tensor, weather: WeatherCondition, severity: float, gen: torch.Generator) -> torch.Tensor:
    """Photometric corruption for source images, scaled by ``severity`` in [0, 1]."""
    if weather is WeatherCondition.SUNNY:
        out = img * (1.0 + 0.2 * severity)
    elif weather is WeatherCondition.CLOUDY:
        gray = img.mean(dim=0, keepdim=True)
        out = img * (1 - 0.6 * severity) + gray * 0.6 * severity
    elif weather is WeatherCondition.FOGGY:
        out = img * (1 - 0.7 * severity) + 0.8 * 0.7 * severity
    elif weather is WeatherCondition.RAINSTORM:
        streaks = (torch.rand(1, img.shape[-1], generator=gen) < 0.25 * severity).float()
        out = img * (1 - 0.4 * severity) + 0.5 * streaks.expand(img.shape[-2], -1)
    else:
        tint = torch.tensor([1.0, 0.7, 0.4])[:, None, None]
        out = img * tint * (1 - 0.6 * severity)
    noise = 0.03 * torch.randn(img.shape, generator=gen)
    return (out + noise).clamp(0.0, 1.0)


def target_weather(img: torch.Tensor, weather: WeatherCondition, gen: torch.Generator) -> torch.Tensor:
    """A different corruption family for the target domain."""
    if weather is WeatherCondition.SUNNY:
        out = img
    elif weather is WeatherCondition.CLOUDY:
        out = img.mean(dim=0, keepdim=True).expand_as(img).clone()
    elif weather is WeatherCondition.FOGGY:
        out = _blur(_blur(img))
    elif weather is WeatherCondition.RAINSTORM:
        streaks = (torch.rand(img.shape[-2], 1, generator=gen) < 0.2).float()
        out = img * (1 - 0.5 * streaks.expand(-1, img.shape[-1]))
    else:
        out = img * torch.tensor([0.4, 0.5, 0.9])[:, None, None]
    noise = 0.08 * torch.randn(img.shape, generator=gen)
    return (_blur(out) + noise).clamp(0.0, 1.0)


# ── class counts ──────────────────────────────────────────────────────

def long_tail_counts(total: int, num_classes: int, imbalance: float) -> list[int]:
    """Exponentially decaying class counts with head/tail ratio ``imbalance``."""
    if total < num_classes:
        raise ValueError("need at least one sample per class")
    if num_classes == 1:
        return [total]
    weights = [imbalance ** (-c / (num_classes - 1)) for c in range(num_classes)]
    scale = sum(weights)
    counts = [max(1, math.floor(total * w / scale)) for w in weights]
    c = 0
    while sum(counts) < total:
        counts[c % num_classes] += 1
        c += 1
    while sum(counts) > total:
        head = counts.index(max(counts))
        counts[head] -= 1
    return counts


# ── builder ───────────────────────────────────────────────────────────

def build_toy_benchmark(
    out_dir: str | Path,
    n_source: int = 1000,
    n_target: int = 1000,
    seed: int = 0,
    image_size: int = 32,
    imbalance: float = 10.0,
) -> Path:
    """Render both domains into *out_dir* and return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    gen = torch.Generator()
    gen.manual_seed(seed)
    weathers = list(WeatherCondition)
    k = len(TOY_CLASSES)

    images: list[torch.Tensor] = []
    records: list[SampleRecord] = []
    eval_labels: dict[str, int] = {}

    for i in range(n_source):
        label = i % k
        weather = weathers[(i // k) % len(weathers)]
        severity = float(_uniform(gen, 0.0, 1.0))
        img = source_weather(render_shape(TOY_CLASSES[label], image_size, gen), weather, severity, gen)
        records.append(SampleRecord(
            id=f"src-{i:05d}",
            image_ref=f"{BUNDLE_NAME}#{len(images)}",
            class_label=label,
            weather=weather,
            prior_quality=round(1.0 - 0.6 * severity, 4),
            domain=DomainTag.SOURCE,
        ))
        images.append(img)

    index = 0
    for label, count in enumerate(long_tail_counts(n_target, k, imbalance)):
        for _ in range(count):
            weather = weathers[int(torch.randint(len(weathers), (1,), generator=gen).item())]
            img = target_weather(render_shape(TOY_CLASSES[label], image_size, gen, target=True), weather, gen)
            rid = f"tgt-{index:05d}"
            records.append(SampleRecord(
                id=rid,
                image_ref=f"{BUNDLE_NAME}#{len(images)}",
                weather=weather,
                domain=DomainTag.TARGET,
            ))
            eval_labels[rid] = label
            images.append(img)
            index += 1

    bundle = (torch.stack(images) * 255.0).round().to(torch.uint8)
    torch.save(bundle, out_dir / BUNDLE_NAME)
    manifest = DomainManifest(records, TOY_CLASSES, out_dir, eval_labels)
    path = write_manifest(manifest, out_dir / MANIFEST_NAME)
    logger.info("Toy benchmark written to %s: %r", out_dir, manifest)
    return path
