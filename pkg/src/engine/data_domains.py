"""
Source / Target Domain Data
───────────────────────────
Loads and validates JSON-Lines manifests describing a labelled source domain
and an unlabelled target domain, counts class histograms, and draws mixed
source/target batches for the adversarial training loop.

Target class labels found in a manifest are quarantined: they are kept out of
``SampleRecord`` and can only be read through
``DomainManifest.evaluation_labels()``.
"""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Optional

import torch
from PIL import Image
from pydantic import ValidationError
from torchvision import transforms
from torchvision.transforms import functional as TF

from src.config.settings import settings
from src.engine.errors import ManifestError
from src.models.models import DomainTag, WeatherCondition
from src.models.schemas import ManifestHeader, ManifestRow, SampleRecord

logger = logging.getLogger(__name__)

Generator = torch.Generator


# ── manifest ──────────────────────────────────────────────────────────

class DomainManifest:
    """Immutable, validated view over a two-domain manifest."""

    def __init__(
        self,
        records: Iterable[SampleRecord],
        label_space: Iterable[str],
        base_dir: str | Path = ".",
        evaluation_labels: Optional[dict[str, int]] = None,
    ) -> None:
        self._records: tuple[SampleRecord, ...] = tuple(records)
        self._label_space: tuple[str, ...] = tuple(label_space)
        self._base_dir = Path(base_dir)
        self._eval_labels: dict[str, int] = dict(evaluation_labels or {})
        self._by_id: dict[str, SampleRecord] = {}

        k = len(self._label_space)
        for rec in self._records:
            if rec.id in self._by_id:
                raise ValueError(f"duplicate record id '{rec.id}'")
            if rec.class_label is not None and rec.class_label >= k:
                raise ValueError(f"record '{rec.id}' class_label {rec.class_label} outside label space of size {k}")
            if rec.domain is DomainTag.TARGET and rec.class_label is not None:
                raise ValueError(f"target record '{rec.id}' must not expose a training label")
            self._by_id[rec.id] = rec
        for rid, label in self._eval_labels.items():
            if rid not in self._by_id or self._by_id[rid].domain is not DomainTag.TARGET:
                raise ValueError(f"evaluation label for unknown target record '{rid}'")
            if not 0 <= label < k:
                raise ValueError(f"evaluation label {label} outside label space of size {k}")

        self._source = tuple(r for r in self._records if r.domain is DomainTag.SOURCE)
        self._target = tuple(r for r in self._records if r.domain is DomainTag.TARGET)

    # ── accessors ─────────────────────────────────────────────────────

    @property
    def records(self) -> tuple[SampleRecord, ...]:
        return self._records

    @property
    def label_space(self) -> tuple[str, ...]:
        return self._label_space

    @property
    def num_classes(self) -> int:
        return len(self._label_space)

    @property
    def base_dir(self) -> Path:
        return self._base_dir

    @property
    def n_s(self) -> int:
        return len(self._source)

    @property
    def n_t(self) -> int:
        return len(self._target)

    @property
    def source_records(self) -> tuple[SampleRecord, ...]:
        return self._source

    @property
    def target_records(self) -> tuple[SampleRecord, ...]:
        return self._target

    @property
    def source_ids(self) -> list[str]:
        return [r.id for r in self._source]

    def record(self, record_id: str) -> SampleRecord:
        return self._by_id[record_id]

    def records_for(self, domain: DomainTag | str) -> tuple[SampleRecord, ...]:
        return self._source if DomainTag(domain) is DomainTag.SOURCE else self._target

    def evaluation_labels(self) -> dict[str, int]:
        """Return held-out target labels. Only evaluation code should call this."""
        return dict(self._eval_labels)

    def with_records(self, records: Iterable[SampleRecord]) -> "DomainManifest":
        return DomainManifest(records, self._label_space, self._base_dir, self._eval_labels)

    def __len__(self) -> int:
        return len(self._records)

    def __repr__(self) -> str:
        return (
            f"<DomainManifest K={self.num_classes} n_s={self.n_s} n_t={self.n_t} "
            f"eval_labels={len(self._eval_labels)}>"
        )


def _field_of(err: ValidationError) -> str:
    first = err.errors()[0]
    loc = first.get("loc") or ("record",)
    return str(loc[0])


def load_manifest(path: str | Path) -> DomainManifest:
    """Parse and validate a manifest file.

    Raises
    ------
    FileNotFoundError
        If *path* does not exist.
    ManifestError
        On any malformed row; the error names the line and field.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")

    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines()]
    if not lines or not lines[0].strip():
        raise ManifestError(0, "header", "missing header line")

    try:
        header = ManifestHeader.model_validate(json.loads(lines[0]))
    except json.JSONDecodeError as exc:
        raise ManifestError(0, "header", f"invalid JSON: {exc.msg}") from exc
    except ValidationError as exc:
        raise ManifestError(0, _field_of(exc), exc.errors()[0]["msg"]) from exc
    if header.manifest_version != settings.MANIFEST_VERSION:
        raise ManifestError(0, "manifest_version", f"unsupported version {header.manifest_version}")

    class_index = {name: i for i, name in enumerate(header.label_space)}
    records: list[SampleRecord] = []
    eval_labels: dict[str, int] = {}
    seen: set[str] = set()

    for lineno, raw in enumerate(lines[1:], start=1):
        if not raw.strip():
            continue
        try:
            row = ManifestRow.model_validate(json.loads(raw))
        except json.JSONDecodeError as exc:
            raise ManifestError(lineno, "record", f"invalid JSON: {exc.msg}") from exc
        except ValidationError as exc:
            raise ManifestError(lineno, _field_of(exc), exc.errors()[0]["msg"]) from exc

        if row.id in seen:
            raise ManifestError(lineno, "id", f"duplicate id '{row.id}'")
        seen.add(row.id)

        label: Optional[int] = None
        if row.class_ is not None:
            if row.class_ not in class_index:
                raise ManifestError(lineno, "class", f"class '{row.class_}' not in label_space")
            label = class_index[row.class_]

        weather: Optional[WeatherCondition] = None
        if row.weather is not None:
            try:
                weather = WeatherCondition.parse(row.weather)
            except ValueError as exc:
                raise ManifestError(lineno, "weather", str(exc)) from exc

        is_source = row.domain is DomainTag.SOURCE
        if is_source and label is None:
            raise ManifestError(lineno, "class", "source record requires class")
        if is_source and weather is None:
            raise ManifestError(lineno, "weather", "source record requires weather")

        if not is_source and label is not None:
            eval_labels[row.id] = label
        records.append(
            SampleRecord(
                id=row.id,
                image_ref=row.image,
                class_label=label if is_source else None,
                weather=weather,
                prior_quality=row.prior_quality,
                prior_score=row.prior_score,
                domain=row.domain,
            )
        )

    manifest = DomainManifest(records, header.label_space, path.parent, eval_labels)
    logger.info("Loaded manifest %s: %r", path, manifest)
    return manifest


def write_manifest(manifest: DomainManifest, path: str | Path) -> Path:
    """Serialise *manifest* (including held-out labels) to *path*."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ManifestHeader(label_space=list(manifest.label_space))
    eval_labels = manifest.evaluation_labels()

    out = [header.model_dump_json()]
    for rec in manifest.records:
        label = rec.class_label if rec.domain is DomainTag.SOURCE else eval_labels.get(rec.id)
        row: dict[str, Any] = {
            "id": rec.id,
            "image": rec.image_ref,
            "class": manifest.label_space[label] if label is not None else None,
            "weather": rec.weather.value if rec.weather else None,
            "prior_quality": rec.prior_quality,
            "domain": rec.domain.value,
        }
        if rec.prior_score is not None:
            row["prior_score"] = rec.prior_score
        out.append(json.dumps(row, sort_keys=True))
    path.write_text("\n".join(out) + "\n", encoding="utf-8")
    return path


# ── histograms ────────────────────────────────────────────────────────

def class_histogram(manifest: DomainManifest, domain: DomainTag | str) -> dict[int, int]:
    """Per-class counts for one domain; absent classes report 0.

    Target counts use the held-out evaluation labels; unlabeled target
    records are not counted.
    """
    domain = DomainTag(domain)
    hist = {k: 0 for k in range(manifest.num_classes)}
    if domain is DomainTag.SOURCE:
        for rec in manifest.source_records:
            hist[rec.class_label] += 1
    else:
        for label in manifest.evaluation_labels().values():
            hist[label] += 1
    return hist


def imbalance_ratio(histogram: dict[int, int]) -> float:
    nonzero = [c for c in histogram.values() if c > 0]
    if not nonzero:
        return 0.0
    return max(nonzero) / min(nonzero)


# ── mixed batch sampling ──────────────────────────────────────────────

@dataclass(frozen=True)
class MixedBatch:
    source_items: tuple[SampleRecord, ...]
    target_items: tuple[SampleRecord, ...]
    batch_size: int

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.source_items] + [r.id for r in self.target_items]

    @property
    def n_source(self) -> int:
        return len(self.source_items)

    @property
    def n_target(self) -> int:
        return len(self.target_items)


def split_batch_size(batch_size: int) -> tuple[int, int]:
    """Return ``(ceil(B/2), floor(B/2))`` source/target slots."""
    return math.ceil(batch_size / 2), batch_size // 2


def _as_generator(rng: Generator | int) -> Generator:
    if isinstance(rng, torch.Generator):
        return rng
    gen = torch.Generator()
    gen.manual_seed(int(rng))
    return gen


def _shuffled(ids: list[str], gen: Generator) -> list[str]:
    order = torch.randperm(len(ids), generator=gen).tolist()
    return [ids[i] for i in order]


def _cycle_draw(pool: list[str], count: int, gen: Generator) -> list[str]:
    """Draw *count* ids, reshuffling *pool* each time it is exhausted."""
    out: list[str] = []
    while len(out) < count:
        out.extend(_shuffled(pool, gen)[: count - len(out)])
    return out


def sample_mixed_batch(
    manifest: DomainManifest,
    active_source_ids: set[str] | Iterable[str],
    batch_size: int,
    rng: Generator | int,
) -> MixedBatch:
    """Draw one mixed batch: ``ceil(B/2)`` active source items, ``floor(B/2)`` target items."""
    active = sorted(set(active_source_ids))
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    if not active:
        raise ValueError("active source set is empty")
    unknown = [i for i in active if i not in {r.id for r in manifest.source_records}]
    if unknown:
        raise ValueError(f"active ids not in source domain: {unknown[:5]}")

    gen = _as_generator(rng)
    n_src, n_tgt = split_batch_size(batch_size)
    src_ids = _cycle_draw(active, n_src, gen)
    tgt_pool = [r.id for r in manifest.target_records]
    tgt_ids = _cycle_draw(tgt_pool, n_tgt, gen) if tgt_pool else []
    return MixedBatch(
        source_items=tuple(manifest.record(i) for i in src_ids),
        target_items=tuple(manifest.record(i) for i in tgt_ids),
        batch_size=batch_size,
    )


class MixedBatchSampler:
    """Single-owner epoch sampler over an active source subset.

    One epoch is one pass over the active source ids in ``ceil(B/2)`` chunks;
    the final short chunk is topped up from a fresh reshuffle.  Target items
    cycle through their own queue across epochs.
    """

    def __init__(self, manifest: DomainManifest, batch_size: int, rng: Generator | int) -> None:
        if batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        self._manifest = manifest
        self._batch_size = batch_size
        self._gen = _as_generator(rng)
        self._target_pool = [r.id for r in manifest.target_records]
        self._target_queue: list[str] = []

    def steps_per_epoch(self, n_active: int) -> int:
        n_src, _ = split_batch_size(self._batch_size)
        return math.ceil(n_active / n_src)

    def _next_targets(self, count: int) -> list[str]:
        out: list[str] = []
        if not self._target_pool:
            return out
        while len(out) < count:
            if not self._target_queue:
                self._target_queue = _shuffled(self._target_pool, self._gen)
            take = min(count - len(out), len(self._target_queue))
            out.extend(self._target_queue[:take])
            self._target_queue = self._target_queue[take:]
        return out

    def epoch(self, active_source_ids: Iterable[str]) -> Iterator[MixedBatch]:
        active = sorted(set(active_source_ids))
        if not active:
            raise ValueError("active source set is empty")
        n_src, n_tgt = split_batch_size(self._batch_size)
        order = _shuffled(active, self._gen)
        for start in range(0, len(order), n_src):
            chunk = order[start:start + n_src]
            if len(chunk) < n_src:
                chunk = chunk + _cycle_draw(active, n_src - len(chunk), self._gen)
            targets = self._next_targets(n_tgt)
            yield MixedBatch(
                source_items=tuple(self._manifest.record(i) for i in chunk),
                target_items=tuple(self._manifest.record(i) for i in targets),
                batch_size=self._batch_size,
            )

    # ── checkpoint support ────────────────────────────────────────────

    def state_dict(self) -> dict[str, Any]:
        return {"generator": self._gen.get_state(), "target_queue": list(self._target_queue)}

    def load_state_dict(self, state: dict[str, Any]) -> None:
        self._gen.set_state(state["generator"])
        self._target_queue = list(state["target_queue"])


# ── images ────────────────────────────────────────────────────────────

PreprocessHook = Callable[[Image.Image], torch.Tensor]


def default_preprocess(image_size: int) -> PreprocessHook:
    return transforms.Compose([
        transforms.Resize((image_size, image_size)),
        transforms.ToTensor(),
    ])


@dataclass
class ImageLoader:
    """Resolves ``image_ref`` values to ``3 x H x W`` float tensors in [0, 1].

    References of the form ``bundle.pt#17`` index a uint8 tensor stack saved
    with ``torch.save``; anything else is decoded from disk through the
    preprocessing hook.
    """

    base_dir: Path
    image_size: int = 224
    preprocess: Optional[PreprocessHook] = None
    _bundles: dict[Path, torch.Tensor] = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self) -> None:
        self.base_dir = Path(self.base_dir)
        if self.preprocess is None:
            self.preprocess = default_preprocess(self.image_size)

    def _bundle(self, path: Path) -> torch.Tensor:
        with self._lock:
            if path not in self._bundles:
                self._bundles[path] = torch.load(path, map_location="cpu", weights_only=True)
            return self._bundles[path]

    def load(self, record: SampleRecord) -> torch.Tensor:
        ref = record.image_ref
        if "#" in ref and ref.split("#", 1)[0].endswith(".pt"):
            file, index = ref.split("#", 1)
            img = self._bundle(self.base_dir / file)[int(index)]
            img = img.float() / 255.0 if img.dtype == torch.uint8 else img.float()
            if img.shape[-1] != self.image_size or img.shape[-2] != self.image_size:
                img = TF.resize(img, [self.image_size, self.image_size], antialias=True)
            return img
        with Image.open(self.base_dir / ref) as pil:
            return self.preprocess(pil.convert("RGB"))

    def batch(self, records: Iterable[SampleRecord]) -> torch.Tensor:
        return torch.stack([self.load(r) for r in records])
