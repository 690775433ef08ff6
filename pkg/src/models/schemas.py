"""
Validated domain types
──────────────────────
pydantic models for manifest records, loss/schedule parameters, the run
configuration and evaluation results.  Enum types live in
``src.models.models`` next to the cache tables.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.config.settings import settings
from src.models.models import AblationMode, DomainTag, WeatherCondition


# ── manifest ───────────────────────────────────────────────────────────

class ManifestHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    manifest_version: int = settings.MANIFEST_VERSION
    label_space: list[str] = Field(min_length=1)
    weather_tags: list[str] = Field(default_factory=lambda: [w.value for w in WeatherCondition])

    @field_validator("label_space")
    @classmethod
    def _unique_labels(cls, value: list[str]) -> list[str]:
        if len(set(value)) != len(value):
            raise ValueError("label_space contains duplicate class names")
        if any(not name.strip() for name in value):
            raise ValueError("label_space contains an empty class name")
        return value

    @field_validator("weather_tags")
    @classmethod
    def _closed_weather_set(cls, value: list[str]) -> list[str]:
        parsed = {WeatherCondition.parse(tag) for tag in value}
        if parsed != set(WeatherCondition):
            raise ValueError("weather_tags must declare exactly the five weather conditions")
        return value


class ManifestRow(BaseModel):
    """One raw manifest line before class/weather resolution."""

    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    image: str = Field(min_length=1)
    domain: DomainTag
    class_: Optional[str] = Field(default=None, alias="class")
    weather: Optional[str] = None
    prior_quality: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    prior_score: Optional[float] = Field(default=None, ge=0.0, le=1.0)


class SampleRecord(BaseModel):
    """One image of either domain.

    Target records never carry ``class_label``; their evaluation labels are
    held back by the manifest (see ``DomainManifest.evaluation_labels``).
    """

    model_config = ConfigDict(frozen=True)

    id: str
    image_ref: str
    class_label: Optional[int] = Field(default=None, ge=0)
    weather: Optional[WeatherCondition] = None
    prior_quality: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    prior_score: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    domain: DomainTag

    @model_validator(mode="after")
    def _source_requirements(self) -> "SampleRecord":
        if self.domain is DomainTag.SOURCE:
            if self.class_label is None:
                raise ValueError("source record requires class")
            if self.weather is None:
                raise ValueError("source record requires weather")
        return self


# ── prompts ────────────────────────────────────────────────────────────

class PromptSpec(BaseModel):
    template: str = settings.PROMPT_TEMPLATES["class-domain"]
    class_name: str = ""
    domain_name: str = ""


# ── losses / schedules ─────────────────────────────────────────────────

class LossWeights(BaseModel):
    alpha: float = Field(default=settings.ALPHA_SKD, ge=0.0)
    beta: float = Field(default=settings.BETA_OFFSET, ge=0.0)
    tau: float = Field(default=0.0, ge=0.0)
    kappa: float = Field(default=settings.KAPPA_CONFIDENCE, ge=0.0, le=1.0)


def _parse_blocks(value: Any) -> Any:
    if isinstance(value, str):
        parts = [p for p in value.replace(";", ",").split(",") if p.strip()]
        return [int(p) for p in parts]
    return value


class PerturbationConfig(BaseModel):
    alternate_blocks: list[int] = Field(default_factory=lambda: list(settings.DEFAULT_ALTERNATE_BLOCKS))
    gamma: float = Field(default=settings.GAMMA_OFFSET, ge=0.0, le=1.0)
    enabled: bool = True
    depth: int = Field(default=12, ge=1)

    @field_validator("alternate_blocks", mode="before")
    @classmethod
    def _split(cls, value: Any) -> Any:
        return _parse_blocks(value)

    @model_validator(mode="after")
    def _blocks_in_range(self) -> "PerturbationConfig":
        bad = [b for b in self.alternate_blocks if not 0 <= b < self.depth]
        if bad:
            raise ValueError(f"alternate_blocks {bad} outside [0, {self.depth})")
        self.alternate_blocks = sorted(set(self.alternate_blocks))
        return self


class TrainSchedule(BaseModel):
    T: int = Field(default=10, ge=1)
    N: int = Field(default=settings.MU_PERIOD, ge=1)
    k: float = Field(default=settings.GROWTH_RATE, gt=0.0)
    lambda0: float = Field(default=settings.LAMBDA0, ge=0.0, le=1.0)
    gamma_base: float = Field(default=settings.GAMMA_OFFSET, ge=0.0)
    beta_base: float = Field(default=settings.BETA_OFFSET, ge=0.0)


class DifficultyScore(BaseModel):
    model_config = ConfigDict(frozen=True)

    sample_id: str
    prior: float
    dynamic: float
    blended: float


# ── run configuration ──────────────────────────────────────────────────

_ABLATION_FLAGS: dict[AblationMode, dict[str, bool]] = {
    AblationMode.ADVERSARIAL_ONLY: dict(use_input_offset=False, use_token_offset=False, use_skd=False, use_curriculum=False),
    AblationMode.INPUT_OFFSET: dict(use_input_offset=True, use_token_offset=False, use_skd=False, use_curriculum=False),
    AblationMode.TOKEN_OFFSET: dict(use_input_offset=False, use_token_offset=True, use_skd=False, use_curriculum=False),
    AblationMode.SKD: dict(use_input_offset=False, use_token_offset=True, use_skd=True, use_curriculum=False),
    AblationMode.FULL: dict(use_input_offset=False, use_token_offset=True, use_skd=True, use_curriculum=True),
}


class TrainConfig(BaseModel):
    """Resolved training configuration.

    Field names double as the keys of the flat ``key=value`` config file.
    """

    model_config = ConfigDict(extra="forbid")

    # data
    manifest: Path
    eval_manifest: Optional[Path] = None

    # optimisation
    epochs: int = Field(default=10, ge=1)
    batch_size: int = Field(default=settings.BATCH_SIZE, ge=2)
    learning_rate: float = Field(default=settings.LEARNING_RATE, gt=0.0)
    momentum: float = Field(default=settings.MOMENTUM, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    seed: int = 0
    checkpoint_every: int = Field(default=1, ge=1)

    # loss weights
    alpha: float = Field(default=settings.ALPHA_SKD, ge=0.0)
    beta: float = Field(default=settings.BETA_OFFSET, ge=0.0)
    gamma: float = Field(default=settings.GAMMA_OFFSET, ge=0.0, le=1.0)
    kappa: float = Field(default=settings.KAPPA_CONFIDENCE, ge=0.0, le=1.0)

    # schedules
    lambda0: float = Field(default=settings.LAMBDA0, ge=0.0, le=1.0)
    growth_rate: float = Field(default=settings.GROWTH_RATE, gt=0.0)
    mu_period: int = Field(default=settings.MU_PERIOD, ge=1)
    alternate_blocks: list[int] = Field(default_factory=lambda: list(settings.DEFAULT_ALTERNATE_BLOCKS))

    # ablation toggles
    use_input_offset: bool = False
    use_token_offset: bool = True
    use_skd: bool = True
    use_curriculum: bool = True

    # backbone
    backbone: str = "vit_base_patch16_224"
    pretrained: bool = True
    image_size: int = Field(default=224, ge=8)
    patch_size: int = Field(default=16, ge=1)
    embed_dim: int = Field(default=768, ge=8)
    depth: int = Field(default=12, ge=1)
    num_heads: int = Field(default=12, ge=1)
    classifier_dropout: float = Field(default=settings.CLASSIFIER_DROPOUT, ge=0.0, lt=1.0)
    reversal_scale: float = Field(default=settings.REVERSAL_SCALE, ge=0.0)

    # vision-language teacher
    provider: str = "hash"
    provider_model: str = "ViT-B-32"
    provider_pretrained: str = "openai"
    embedding_dim: int = Field(default=512, ge=2)
    prompt_template: str = "class-domain"
    embedding_cache: Optional[Path] = None
    cache_image_embeddings: bool = True

    device: str = settings.DEVICE

    @field_validator("alternate_blocks", mode="before")
    @classmethod
    def _split(cls, value: Any) -> Any:
        return _parse_blocks(value)

    @model_validator(mode="after")
    def _consistency(self) -> "TrainConfig":
        if self.use_input_offset and self.use_token_offset:
            raise ValueError("use_input_offset and use_token_offset are mutually exclusive")
        bad = [b for b in self.alternate_blocks if not 0 <= b < self.depth]
        if bad:
            raise ValueError(f"alternate_blocks {bad} outside [0, {self.depth})")
        if not self.alternate_blocks:
            raise ValueError("alternate_blocks must not be empty")
        if self.backbone == "custom" and self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        return self

    # ── derived views ────────────────────────────────────────────────

    def with_ablation(self, mode: AblationMode | str) -> "TrainConfig":
        flags = _ABLATION_FLAGS[AblationMode(mode)]
        return self.model_copy(update=flags)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(
            T=self.epochs,
            N=self.mu_period,
            k=self.growth_rate,
            lambda0=self.lambda0,
            gamma_base=self.gamma,
            beta_base=self.beta,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta, kappa=self.kappa)

    def perturbation(self) -> PerturbationConfig:
        return PerturbationConfig(
            alternate_blocks=self.alternate_blocks,
            gamma=self.gamma,
            enabled=self.use_token_offset,
            depth=self.depth,
        )

    @property
    def template(self) -> str:
        return settings.PROMPT_TEMPLATES.get(self.prompt_template, self.prompt_template)


# ── evaluation ─────────────────────────────────────────────────────────

class EvalResult(BaseModel):
    label_space: list[str]
    overall_acc: float = Field(ge=0.0, le=1.0)
    macro_acc: float = Field(ge=0.0, le=1.0)
    per_class: dict[str, Optional[float]]
    per_weather: dict[str, Optional[float]]
    class_counts: dict[str, int]
    weather_counts: dict[str, int]
    confusion: list[list[int]]
    n_eval: int = Field(ge=0)
