"""
Adaptation Network
──────────────────
The four learnable parts of the adversarial adaptation network:

* ``FeatureExtractor`` (F): a ViT backbone with per-block input hooks
* ``EnhancementHead`` (G): projects the class token into the VLM space
* ``ClassifierHead`` (C): dropout + affine map to K class logits
* ``DomainDiscriminator`` (D): 3-layer MLP behind a gradient reversal

Routing: D consumes F's class-token feature directly; C consumes G's output.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional

import timm
import torch
import torch.nn as nn
from timm.models.vision_transformer import VisionTransformer

from src.config.settings import settings
from src.engine.errors import CheckpointError
from src.models.schemas import TrainConfig

logger = logging.getLogger(__name__)

TokenHook = Callable[[torch.Tensor], torch.Tensor]


# ── gradient reversal ─────────────────────────────────────────────────

class GradientReversal(torch.autograd.Function):
    """Identity forward; backward multiplies the incoming gradient by ``-scale``."""

    @staticmethod
    def forward(ctx, x: torch.Tensor, scale: float) -> torch.Tensor:
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return grad_output.neg() * ctx.scale, None


def grad_reverse(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    if scale < 0:
        raise ValueError("reversal scale must be >= 0")
    return GradientReversal.apply(x, scale)


# ── token sequences ───────────────────────────────────────────────────

@dataclass
class TokenSequence:
    """``B x (1 + P) x d`` input of transformer block ``block_index``."""

    data: torch.Tensor
    block_index: int

    @property
    def shape(self) -> torch.Size:
        return self.data.shape


@dataclass
class FeatureOutput:
    final_feature: torch.Tensor
    per_block_inputs: dict[int, TokenSequence] = field(default_factory=dict)


# ── F ─────────────────────────────────────────────────────────────────

class FeatureExtractor(nn.Module):
    """Patch embedding + transformer blocks with optional per-block hooks."""

    def __init__(self, vit: VisionTransformer) -> None:
        super().__init__()
        if not getattr(vit, "has_class_token", True):
            raise ValueError("backbone must use a class token")
        self.vit = vit

    @property
    def depth(self) -> int:
        return len(self.vit.blocks)

    @property
    def embed_dim(self) -> int:
        return int(self.vit.embed_dim)

    @property
    def image_size(self) -> tuple[int, int]:
        size = self.vit.patch_embed.img_size
        return (int(size[0]), int(size[1]))

    def forward(
        self,
        images: torch.Tensor,
        hooks: Optional[Mapping[int, TokenHook]] = None,
        record_blocks: Iterable[int] = (),
    ) -> FeatureOutput:
        if images.dim() != 4 or tuple(images.shape[-2:]) != self.image_size:
            raise ValueError(
                f"expected images of shape B x C x {self.image_size[0]} x {self.image_size[1]}, "
                f"got {tuple(images.shape)}"
            )
        record = set(record_blocks)
        recorded: dict[int, TokenSequence] = {}
        vit = self.vit

        x = vit.patch_embed(images)
        x = vit._pos_embed(x)
        x = vit.patch_drop(x)
        x = vit.norm_pre(x)
        for index, block in enumerate(vit.blocks):
            if hooks and index in hooks:
                x = hooks[index](x)
            if index in record:
                recorded[index] = TokenSequence(x, index)
            x = block(x)
        x = vit.norm(x)
        return FeatureOutput(final_feature=x[:, 0], per_block_inputs=recorded)


def build_feature_extractor(config: TrainConfig) -> FeatureExtractor:
    if config.backbone == "custom":
        vit = VisionTransformer(
            img_size=config.image_size,
            patch_size=config.patch_size,
            embed_dim=config.embed_dim,
            depth=config.depth,
            num_heads=config.num_heads,
            num_classes=0,
            global_pool="token",
            class_token=True,
        )
    else:
        vit = timm.create_model(
            config.backbone,
            pretrained=config.pretrained,
            num_classes=0,
            img_size=config.image_size,
        )
    extractor = FeatureExtractor(vit)
    if extractor.depth != config.depth:
        raise ValueError(f"backbone '{config.backbone}' has {extractor.depth} blocks, config says {config.depth}")
    logger.info(
        "Backbone %s: depth=%d dim=%d input=%s pretrained=%s",
        config.backbone, extractor.depth, extractor.embed_dim, extractor.image_size,
        config.pretrained and config.backbone != "custom",
    )
    return extractor


# ── G / C / D ─────────────────────────────────────────────────────────

class EnhancementHead(nn.Module):
    """d → d → d_e perceptron; the last layer starts near zero."""

    def __init__(self, in_dim: int, out_dim: int, init_std: float = 0.01) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, in_dim),
            nn.GELU(),
            nn.Linear(in_dim, out_dim),
        )
        nn.init.normal_(self.net[2].weight, std=init_std)
        nn.init.zeros_(self.net[2].bias)
        self.out_dim = out_dim

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        return self.net(feature)


class ClassifierHead(nn.Module):
    def __init__(self, in_dim: int, num_classes: int, dropout: float = settings.CLASSIFIER_DROPOUT) -> None:
        super().__init__()
        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(in_dim, num_classes)
        self.num_classes = num_classes

    def forward(self, enhanced: torch.Tensor) -> torch.Tensor:
        return self.fc(self.dropout(enhanced))

    def probabilities(self, enhanced: torch.Tensor) -> torch.Tensor:
        return self.forward(enhanced).softmax(dim=-1)


class DomainDiscriminator(nn.Module):
    """Two domain logits (index 0 = source, 1 = target)."""

    def __init__(self, in_dim: int, hidden: int = settings.DISCRIMINATOR_HIDDEN) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Linear(hidden, 2),
        )

    def forward(self, feature: torch.Tensor, reversal_scale: float = settings.REVERSAL_SCALE) -> torch.Tensor:
        return self.net(grad_reverse(feature, reversal_scale))


class AdaptationModel(nn.Module):
    def __init__(
        self,
        feature_extractor: FeatureExtractor,
        embedding_dim: int,
        num_classes: int,
        dropout: float = settings.CLASSIFIER_DROPOUT,
        discriminator_hidden: int = settings.DISCRIMINATOR_HIDDEN,
    ) -> None:
        super().__init__()
        d = feature_extractor.embed_dim
        self.feature_extractor = feature_extractor
        self.enhancer = EnhancementHead(d, embedding_dim)
        self.classifier = ClassifierHead(embedding_dim, num_classes, dropout)
        self.discriminator = DomainDiscriminator(d, discriminator_hidden)

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> torch.Tensor:
        """Class probabilities on the inference path F → G → C (dropout off)."""
        was_training = self.training
        self.eval()
        try:
            feats = self.feature_extractor(images).final_feature
            return self.classifier.probabilities(self.enhancer(feats))
        finally:
            self.train(was_training)


def build_model(config: TrainConfig, num_classes: int, embedding_dim: int) -> AdaptationModel:
    extractor = build_feature_extractor(config)
    return AdaptationModel(extractor, embedding_dim, num_classes, dropout=config.classifier_dropout)


# ── operations ────────────────────────────────────────────────────────

def forward_features(
    extractor: FeatureExtractor,
    images: torch.Tensor,
    record_blocks: Iterable[int] = (),
    hooks: Optional[Mapping[int, TokenHook]] = None,
) -> tuple[torch.Tensor, dict[int, TokenSequence]]:
    out = extractor(images, hooks=hooks, record_blocks=record_blocks)
    return out.final_feature, out.per_block_inputs


def enhance(head: EnhancementHead, feature: torch.Tensor) -> torch.Tensor:
    return head(feature)


def classify(head: ClassifierHead, enhanced: torch.Tensor, training: bool) -> torch.Tensor:
    head.train(training)
    return head.probabilities(enhanced)


def discriminate(head: DomainDiscriminator, feature: torch.Tensor, reversal_scale: float = 1.0) -> torch.Tensor:
    return head(feature, reversal_scale)


# ── checkpoints ───────────────────────────────────────────────────────

_REQUIRED_KEYS = {"version", "config", "label_space", "embedding_dim", "model", "optimizer", "train_state"}


def save_checkpoint(
    path: str | Path,
    model: AdaptationModel,
    optimizer: Optional[torch.optim.Optimizer],
    config: TrainConfig,
    label_space: list[str],
    train_state: dict[str, Any],
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": settings.CHECKPOINT_VERSION,
        "config": config.model_dump(mode="json"),
        "label_space": list(label_space),
        "embedding_dim": model.enhancer.out_dim,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else {},
        "train_state": train_state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    logger.info("Checkpoint written: %s (epoch=%s)", path, train_state.get("epoch"))
    return path


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path} is corrupt or unreadable: {exc}") from exc
    if not isinstance(payload, dict) or not _REQUIRED_KEYS.issubset(payload):
        raise CheckpointError(f"checkpoint {path} is missing required sections")
    if payload["version"] != settings.CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint {path} has version {payload['version']}, expected {settings.CHECKPOINT_VERSION}")
    return payload


def restore_model(model: AdaptationModel, payload: dict[str, Any]) -> AdaptationModel:
    try:
        model.load_state_dict(payload["model"], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not match the model architecture: {exc}") from exc
    return model


def model_from_checkpoint(payload: dict[str, Any]) -> tuple[AdaptationModel, TrainConfig]:
    """Rebuild the network described by a checkpoint (backbone weights come from the checkpoint)."""
    config = TrainConfig.model_validate(payload["config"]).model_copy(update={"pretrained": False})
    model = build_model(config, len(payload["label_space"]), int(payload["embedding_dim"]))
    return restore_model(model, payload), config
