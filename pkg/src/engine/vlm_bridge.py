"""
Vision-Language Teacher Bridge
──────────────────────────────
Frozen text / image embeddings from a vision-language model behind a small
provider contract, prompt rendering, and a SQLite-backed embedding cache.

Two providers ship:

* ``HashEmbeddingProvider``: deterministic unit vectors seeded by a hash of
  the input; lets the whole loss/schedule stack run without model weights.
* ``OpenClipProvider``: a frozen ``open_clip`` model (optional dependency).
"""

from __future__ import annotations

import hashlib
import logging
import string
import threading
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn.functional as F
from sqlalchemy import delete, select
from sqlalchemy.exc import SQLAlchemyError
from torchvision.transforms import functional as TF

from src.config.settings import settings
from src.db.database import init_db, make_engine, make_session_factory
from src.engine.errors import ProviderError
from src.models.models import CachedEmbedding, CacheMeta, EmbeddingKind, WeatherCondition
from src.models.schemas import PromptSpec

logger = logging.getLogger(__name__)

_SLOTS = {"class", "domain"}


# ── provider contract ─────────────────────────────────────────────────

@runtime_checkable
class EmbeddingProvider(Protocol):
    """Frozen encoder pair. Identical inputs must give identical outputs."""

    identifier: str
    d_e: int

    def embed_text(self, prompts: Sequence[str]) -> torch.Tensor: ...

    def embed_image(self, images: torch.Tensor) -> torch.Tensor: ...


class HashEmbeddingProvider:
    """Seeded unit vectors keyed by a sha256 of the input."""

    def __init__(self, d_e: int = 512, salt: str = "") -> None:
        if d_e < 2:
            raise ValueError("d_e must be >= 2")
        self.d_e = d_e
        self.identifier = f"hash-v1:{d_e}:{salt}"
        self._salt = salt
        self.text_calls = 0
        self.image_calls = 0

    def _vector(self, payload: bytes) -> torch.Tensor:
        digest = hashlib.sha256(self._salt.encode() + payload).digest()
        gen = torch.Generator()
        gen.manual_seed(int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF)
        vec = torch.randn(self.d_e, generator=gen, dtype=torch.float64)
        return (vec / vec.norm()).float()

    def embed_text(self, prompts: Sequence[str]) -> torch.Tensor:
        self.text_calls += len(prompts)
        return torch.stack([self._vector(b"text:" + p.encode("utf-8")) for p in prompts])

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        self.image_calls += images.shape[0]
        rows = []
        for img in images:
            payload = img.detach().to("cpu", torch.float32).contiguous().numpy().tobytes()
            rows.append(self._vector(b"image:" + payload))
        return torch.stack(rows)


class OpenClipProvider:
    """Frozen ``open_clip`` encoders with internal serialisation of calls."""

    _MEAN = (0.48145466, 0.4578275, 0.40821073)
    _STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, model_name: str = "ViT-B-32", pretrained: str = "openai", device: str = "cpu") -> None:
        import open_clip

        model, _, _ = open_clip.create_model_and_transforms(model_name, pretrained=pretrained, device=device)
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self._model = model
        self._tokenizer = open_clip.get_tokenizer(model_name)
        self._device = device
        self._lock = threading.Lock()
        size = getattr(model.visual, "image_size", 224)
        self._resolution = int(size[0] if isinstance(size, (tuple, list)) else size)
        self.d_e = int(model.text_projection.shape[-1])
        self.identifier = f"open_clip:{model_name}:{pretrained}"
        logger.info("Loaded frozen VLM %s (d_e=%d)", self.identifier, self.d_e)

    @torch.no_grad()
    def embed_text(self, prompts: Sequence[str]) -> torch.Tensor:
        with self._lock:
            tokens = self._tokenizer(list(prompts)).to(self._device)
            return self._model.encode_text(tokens).float().cpu()

    @torch.no_grad()
    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        x = TF.resize(images.float(), [self._resolution, self._resolution], antialias=True)
        x = TF.normalize(x, self._MEAN, self._STD)
        with self._lock:
            return self._model.encode_image(x.to(self._device)).float().cpu()


def build_provider(name: str, d_e: int = 512, model_name: str = "ViT-B-32",
                   pretrained: str = "openai", device: str = "cpu") -> EmbeddingProvider:
    if name == "hash":
        return HashEmbeddingProvider(d_e=d_e)
    if name == "open_clip":
        return OpenClipProvider(model_name=model_name, pretrained=pretrained, device=device)
    raise ValueError(f"unknown embedding provider '{name}' (expected 'hash' or 'open_clip')")


# ── prompts ───────────────────────────────────────────────────────────

def weather_phrase(weather: WeatherCondition | str) -> str:
    return settings.WEATHER_PHRASES[WeatherCondition.parse(weather).value]


def render_prompt(prompt: PromptSpec) -> str:
    """Substitute ``{class}`` / ``{domain}`` into ``prompt.template``.

    Raises ``ValueError`` for unknown slots, positional slots, or a used slot
    whose value is empty.
    """
    slots = [name for _, name, _, _ in string.Formatter().parse(prompt.template) if name is not None]
    unknown = [s for s in slots if s not in _SLOTS]
    if unknown:
        raise ValueError(f"template declares unsupported slot(s) {unknown}")
    values = {"class": prompt.class_name, "domain": prompt.domain_name}
    for slot in slots:
        if not values[slot].strip():
            raise ValueError(f"template uses '{{{slot}}}' but no {slot} name was given")
    rendered = prompt.template.format(**values)
    if "{" in rendered or "}" in rendered:
        raise ValueError(f"rendered prompt still contains a slot: {rendered!r}")
    return rendered


# ── embedding cache ───────────────────────────────────────────────────

class EmbeddingCache:
    """Key → vector store bound to one provider identity.

    Opening the cache with a different provider, dimension, normalisation
    flag or schema version clears it.
    """

    def __init__(self, path: str | Path, provider_id: str, d_e: int, normalized: bool = True) -> None:
        self.path = Path(path)
        self._engine = make_engine(self.path)
        init_db(self._engine)
        self._session = make_session_factory(self._engine)
        self._write_lock = threading.RLock()
        self.provider_id = provider_id
        self.d_e = d_e
        self.normalized = normalized
        self._ensure_header()

    def _ensure_header(self) -> None:
        with self._write_lock, self._session() as session, session.begin():
            meta = session.execute(select(CacheMeta).limit(1)).scalar_one_or_none()
            matches = (
                meta is not None
                and meta.provider_id == self.provider_id
                and meta.embedding_dim == self.d_e
                and meta.normalized == self.normalized
                and meta.schema_version == settings.CACHE_SCHEMA_VERSION
            )
            if matches:
                return
            if meta is not None:
                logger.warning(
                    "Embedding cache %s built for %s (d_e=%d); invalidating for %s (d_e=%d)",
                    self.path, meta.provider_id, meta.embedding_dim, self.provider_id, self.d_e,
                )
            session.execute(delete(CachedEmbedding))
            session.execute(delete(CacheMeta))
            session.add(CacheMeta(
                provider_id=self.provider_id,
                embedding_dim=self.d_e,
                normalized=self.normalized,
                schema_version=settings.CACHE_SCHEMA_VERSION,
            ))

    def get_many(self, kind: EmbeddingKind, keys: Sequence[str]) -> dict[str, torch.Tensor]:
        if not keys:
            return {}
        found: dict[str, torch.Tensor] = {}
        try:
            with self._session() as session:
                for start in range(0, len(keys), 500):
                    chunk = list(keys[start:start + 500])
                    rows = session.execute(
                        select(CachedEmbedding.key, CachedEmbedding.vector)
                        .where(CachedEmbedding.kind == kind.value, CachedEmbedding.key.in_(chunk))
                    ).all()
                    for key, blob in rows:
                        found[key] = torch.from_numpy(np.frombuffer(blob, dtype=np.float32).copy())
        except SQLAlchemyError:
            logger.exception("Embedding cache read failed; treating as miss")
            return {}
        return found

    def put_many(self, kind: EmbeddingKind, items: dict[str, torch.Tensor]) -> None:
        if not items:
            return
        with self._write_lock, self._session() as session, session.begin():
            for key, vec in items.items():
                blob = vec.detach().to("cpu", torch.float32).contiguous().numpy().tobytes()
                existing = session.execute(
                    select(CachedEmbedding)
                    .where(CachedEmbedding.kind == kind.value, CachedEmbedding.key == key)
                ).scalar_one_or_none()
                if existing is None:
                    session.add(CachedEmbedding(kind=kind.value, key=key, vector=blob))
                else:
                    existing.vector = blob

    def close(self) -> None:
        self._engine.dispose()


# ── embedding operations ──────────────────────────────────────────────

def _normalize(vectors: torch.Tensor) -> torch.Tensor:
    return F.normalize(vectors.float(), dim=-1, eps=settings.EPSILON)


def text_embedding_table(
    provider: EmbeddingProvider,
    label_space: Sequence[str],
    weather_tags: Iterable[WeatherCondition | str],
    template: str,
    cache: Optional[EmbeddingCache] = None,
) -> dict[tuple[str, WeatherCondition], torch.Tensor]:
    """Normalized text embedding for every (class, weather) pair."""
    weathers = [WeatherCondition.parse(w) for w in weather_tags]
    keys: list[tuple[str, WeatherCondition]] = [(c, w) for c in label_space for w in weathers]
    prompts = {
        key: render_prompt(PromptSpec(template=template, class_name=key[0], domain_name=weather_phrase(key[1])))
        for key in keys
    }

    cached = cache.get_many(EmbeddingKind.TEXT, sorted(set(prompts.values()))) if cache else {}
    missing = sorted({p for p in prompts.values() if p not in cached})
    fresh: dict[str, torch.Tensor] = {}
    for prompt in missing:
        try:
            vec = provider.embed_text([prompt])[0]
        except Exception as exc:
            raise ProviderError(prompt, str(exc)) from exc
        if vec.shape[-1] != provider.d_e:
            raise ProviderError(prompt, f"dimension {vec.shape[-1]} != d_e {provider.d_e}")
        fresh[prompt] = _normalize(vec)
    if cache and fresh:
        cache.put_many(EmbeddingKind.TEXT, fresh)
    if missing:
        logger.info("Embedded %d prompts (%d cache hits)", len(missing), len(cached))

    lookup = {**cached, **fresh}
    return {key: lookup[prompts[key]] for key in keys}


def text_embedding_tensor(
    table: dict[tuple[str, WeatherCondition], torch.Tensor],
    label_space: Sequence[str],
) -> torch.Tensor:
    """Stack a table into ``K x 5 x d_e`` indexed by (class index, weather order)."""
    weathers = list(WeatherCondition)
    return torch.stack([torch.stack([table[(c, w)] for w in weathers]) for c in label_space])


def image_cache_key(sample_id: str, image: torch.Tensor) -> str:
    """``<sample_id>@<digest of the pixels>``."""
    pixels = image.detach().to("cpu", torch.float32).contiguous().numpy()
    digest = hashlib.sha256(pixels.tobytes()).hexdigest()[:16]
    return f"{sample_id}@{digest}"


def image_embedding(
    provider: EmbeddingProvider,
    images: torch.Tensor,
    keys: Optional[Sequence[str]] = None,
    cache: Optional[EmbeddingCache] = None,
) -> torch.Tensor:
    """Normalized, gradient-free image embeddings, one row per image.

    When *keys* and *cache* are given, vectors are looked up and stored under
    ``image_cache_key(key, image)``, so a key whose pixels changed misses.
    """
    single = images.dim() == 3
    batch = images.unsqueeze(0) if single else images
    if keys is not None and len(keys) != batch.shape[0]:
        raise ValueError("keys must match the number of images")
    if keys is not None and cache is not None:
        keys = [image_cache_key(k, img) for k, img in zip(keys, batch)]

    out: list[Optional[torch.Tensor]] = [None] * batch.shape[0]
    hits = cache.get_many(EmbeddingKind.IMAGE, list(keys)) if (cache and keys) else {}
    todo = [i for i in range(batch.shape[0]) if not (keys and keys[i] in hits)]
    for i in range(batch.shape[0]):
        if keys and keys[i] in hits:
            out[i] = hits[keys[i]]

    if todo:
        with torch.no_grad():
            try:
                vecs = provider.embed_image(batch[todo].detach())
            except Exception as exc:
                subject = keys[todo[0]] if keys else "image batch"
                raise ProviderError(subject, str(exc)) from exc
        if vecs.shape[-1] != provider.d_e:
            raise ProviderError("image batch", f"dimension {vecs.shape[-1]} != d_e {provider.d_e}")
        vecs = _normalize(vecs)
        for row, i in enumerate(todo):
            out[i] = vecs[row]
        if cache and keys:
            cache.put_many(EmbeddingKind.IMAGE, {keys[i]: vecs[row] for row, i in enumerate(todo)})

    result = torch.stack(out).detach()  # type: ignore[arg-type]
    return result[0] if single else result


# ── quality provider ──────────────────────────────────────────────────

class PromptQualityProvider:
    """Image quality in [0, 1] from antonym prompts scored by a VLM."""

    def __init__(self, provider: EmbeddingProvider, temperature: float = 100.0) -> None:
        self._provider = provider
        self._temperature = temperature
        good, bad = settings.QUALITY_PROMPTS
        self._anchors = _normalize(provider.embed_text([good, bad]))

    def score(self, images: torch.Tensor) -> torch.Tensor:
        emb = image_embedding(self._provider, images)
        if emb.dim() == 1:
            emb = emb.unsqueeze(0)
        logits = self._temperature * emb @ self._anchors.T
        return logits.softmax(dim=-1)[:, 0]
