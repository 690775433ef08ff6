import enum
from datetime import datetime

from sqlalchemy import (
    Column, Integer, String, Boolean, DateTime, LargeBinary, UniqueConstraint,
)

from src.db.database import Base


# ── Enums ──────────────────────────────────────────────────────────────────────

class WeatherCondition(str, enum.Enum):
    SUNNY = "sunny"
    CLOUDY = "cloudy"
    FOGGY = "foggy"
    RAINSTORM = "rainstorm"
    SUNSET_NIGHT = "sunset_night"

    @classmethod
    def parse(cls, value: "str | WeatherCondition") -> "WeatherCondition":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            allowed = ", ".join(w.value for w in cls)
            raise ValueError(f"unknown weather '{value}' (expected one of: {allowed})") from None


class DomainTag(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


class AblationMode(str, enum.Enum):
    ADVERSARIAL_ONLY = "adversarial-only"
    INPUT_OFFSET = "input-offset"
    TOKEN_OFFSET = "token-offset"
    SKD = "skd"
    FULL = "full"


class EmbeddingKind(str, enum.Enum):
    TEXT = "text"
    IMAGE = "image"


class MetricChannel(str, enum.Enum):
    STEP = "step"
    EPOCH = "epoch"
    CURRICULUM = "curriculum"
    EVAL = "eval"


# ── Models ─────────────────────────────────────────────────────────────────────

class CacheMeta(Base):
    __tablename__ = "cache_meta"

    id = Column(Integer, primary_key=True)
    provider_id = Column(String(200), nullable=False)
    embedding_dim = Column(Integer, nullable=False)
    normalized = Column(Boolean, nullable=False, default=True)
    schema_version = Column(Integer, nullable=False)
    created_at = Column(DateTime, default=datetime.utcnow)


class CachedEmbedding(Base):
    __tablename__ = "cached_embeddings"
    __table_args__ = (
        UniqueConstraint("kind", "key", name="uq_embedding_kind_key"),
    )

    id = Column(Integer, primary_key=True)
    kind = Column(String(10), nullable=False, index=True)
    key = Column(String(500), nullable=False)
    vector = Column(LargeBinary, nullable=False)
