"""
Adaptation Trainer
──────────────────
Runs the min-max optimisation over epochs.  Each step makes one clean pass
(F → G → C on the whole mixed batch, F → D through the gradient reversal)
and, when an offset variant is enabled, one perturbed pass (F with an offset
at a randomly chosen block, or on offset pixels, → G → C).  A single SGD step
then updates all four parts.

Every random draw comes from a named sub-seed of ``config.seed``:

* ``data``         : mixed-batch sampling
* ``perturbation`` : block choice and within-batch pairing
* ``omega``        : KL direction of the offset loss
* ``dropout``      : the global torch RNG (classifier dropout)
* ``init``         : parameter initialisation
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Optional

import torch
from tqdm import tqdm

from src.config.settings import settings
from src.engine.curriculum import (
    CurriculumEngine,
    adaptive_scalar,
    lambda_schedule,
    modulated_scalars,
    phi_schedule,
    schedule_position,
    tau_schedule,
)
from src.engine.data_domains import DomainManifest, ImageLoader, MixedBatch, MixedBatchSampler
from src.engine.errors import CheckpointError
from src.engine.losses import (
    cross_entropy,
    domain_adversarial_loss,
    focal_loss,
    offset_refinement_loss,
    skd_loss,
    total_objective,
)
from src.engine.model_core import (
    AdaptationModel,
    build_model,
    classify,
    discriminate,
    enhance,
    forward_features,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from src.engine.perturbation import PerturbationPlan, input_offset
from src.engine.vlm_bridge import (
    EmbeddingCache,
    EmbeddingProvider,
    image_embedding,
    text_embedding_table,
    text_embedding_tensor,
)
from src.models.models import WeatherCondition
from src.models.schemas import SampleRecord, TrainConfig
from src.telemetry.metrics import MetricsLog

logger = logging.getLogger(__name__)

SEED_NAMES = ("data", "perturbation", "omega", "dropout", "init")
_WEATHER_ORDER = {w: i for i, w in enumerate(WeatherCondition)}
# Config keys that may change between a checkpoint and its resumption.
_RESUMABLE_KEYS = {"epochs", "checkpoint_every", "device", "eval_manifest", "embedding_cache"}


def derive_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def seed_fanout(seed: int) -> dict[str, int]:
    return {name: derive_seed(seed, name) for name in SEED_NAMES}


def _generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(seed)
    return gen


@dataclass
class TrainState:
    """Position of a run: next epoch ``t``, global iteration ``n`` and ``A_t``."""

    epoch: int = 0
    iteration: int = 0
    active_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"epoch": self.epoch, "iteration": self.iteration, "active_ids": list(self.active_ids)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainState":
        return cls(int(data["epoch"]), int(data["iteration"]), list(data["active_ids"]))


class FitResult(NamedTuple):
    checkpoint: Path
    metrics_path: Optional[Path]
    state: TrainState


class DomainAdaptationTrainer:
    """Owns the model, optimiser, samplers and schedules of one training run.

    Parameters
    ----------
    config : TrainConfig
        Resolved run configuration (ablation flags already applied).
    manifest : DomainManifest
        Source and target records; target labels are never read here.
    provider : EmbeddingProvider
        Frozen vision-language teacher used for the distillation targets.
    loader : ImageLoader, optional
        Resolves image references; defaults to one rooted at the manifest.
    metrics : MetricsLog, optional
        Receives one ``step`` record per batch and one ``epoch`` record per epoch.
    """

    def __init__(
        self,
        config: TrainConfig,
        manifest: DomainManifest,
        provider: EmbeddingProvider,
        loader: Optional[ImageLoader] = None,
        metrics: Optional[MetricsLog] = None,
        cache: Optional[EmbeddingCache] = None,
        score_dump: Optional[str | Path] = None,
    ) -> None:
        if manifest.n_s == 0 or manifest.n_t == 0:
            raise ValueError("training needs at least one source and one target record")
        if config.use_skd and provider.d_e != config.embedding_dim:
            raise ValueError(f"provider d_e {provider.d_e} != config embedding_dim {config.embedding_dim}")

        self.config = config
        self.manifest = manifest
        self.provider = provider
        self.cache = cache
        self.device = torch.device(config.device)
        self.seeds = seed_fanout(config.seed)
        self.schedule = config.schedule()
        self.metrics = metrics if metrics is not None else MetricsLog()
        self.loader = loader or ImageLoader(manifest.base_dir, config.image_size)

        torch.manual_seed(self.seeds["init"])
        self.model: AdaptationModel = build_model(config, manifest.num_classes, config.embedding_dim).to(self.device)
        torch.manual_seed(self.seeds["dropout"])

        self.optimizer = torch.optim.SGD(
            self.model.parameters(),
            lr=config.learning_rate,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
        )
        self.sampler = MixedBatchSampler(manifest, config.batch_size, _generator(self.seeds["data"]))
        self.perturbation = PerturbationPlan(config.perturbation(), _generator(self.seeds["perturbation"]))
        self._omega_rng = _generator(self.seeds["omega"])
        self.weights = config.loss_weights()

        self.curriculum = (
            CurriculumEngine(manifest.source_records, self.schedule, score_dump) if config.use_curriculum else None
        )
        self._text_table: Optional[torch.Tensor] = None
        self._image_memo: dict[str, torch.Tensor] = {}

        self.state = TrainState()
        self._started = False

    def __repr__(self) -> str:
        return (
            f"<DomainAdaptationTrainer epoch={self.state.epoch}/{self.config.epochs} "
            f"iteration={self.state.iteration} active={len(self.state.active_ids)}>"
        )

    def start(self) -> list[str]:
        """Select the first epoch's source subset, unless a checkpoint already restored one."""
        if not self._started:
            self.state.active_ids = self._select_active(self.state.epoch)
            self._started = True
        return self.state.active_ids

    @property
    def offset_enabled(self) -> bool:
        return self.config.use_token_offset or self.config.use_input_offset

    # ── teacher targets ───────────────────────────────────────────────

    def _teacher_text(self) -> torch.Tensor:
        if self._text_table is None:
            table = text_embedding_table(
                self.provider, self.manifest.label_space, list(WeatherCondition), self.config.template, self.cache,
            )
            self._text_table = text_embedding_tensor(table, self.manifest.label_space).to(self.device)
        return self._text_table

    def _text_rows(self, records: tuple[SampleRecord, ...]) -> torch.Tensor:
        table = self._teacher_text()
        classes = torch.tensor([r.class_label for r in records], device=self.device)
        weathers = torch.tensor([_WEATHER_ORDER[r.weather] for r in records], device=self.device)
        return table[classes, weathers]

    def _image_rows(self, records: tuple[SampleRecord, ...], images: torch.Tensor) -> torch.Tensor:
        ids = [r.id for r in records]
        if not self.config.cache_image_embeddings:
            return image_embedding(self.provider, images.cpu()).to(self.device)
        todo = [i for i, rid in enumerate(ids) if rid not in self._image_memo]
        if todo:
            fresh = image_embedding(self.provider, images[todo].cpu(), [ids[i] for i in todo], self.cache)
            for row, i in enumerate(todo):
                self._image_memo[ids[i]] = fresh[row]
        return torch.stack([self._image_memo[rid] for rid in ids]).to(self.device)

    # ── curriculum ────────────────────────────────────────────────────

    @torch.no_grad()
    def score_source_pool(self) -> torch.Tensor:
        """Per-sample cross-entropy over the full source pool (eval mode, no gradient)."""
        ids = self.curriculum.pool_ids if self.curriculum else sorted(self.manifest.source_ids)
        losses = []
        for start in range(0, len(ids), self.config.batch_size):
            records = [self.manifest.record(i) for i in ids[start:start + self.config.batch_size]]
            images = self.loader.batch(records).to(self.device)
            labels = torch.tensor([r.class_label for r in records], device=self.device)
            losses.append(cross_entropy(self.model.predict(images), labels, reduction="none").cpu())
        return torch.cat(losses)

    def _select_active(self, epoch: int) -> list[str]:
        if self.curriculum is None:
            return sorted(self.manifest.source_ids)
        position = schedule_position(epoch, self.schedule.T)
        ce = self.score_source_pool() if phi_schedule(position, self.schedule.T) > 0 else None
        chosen = self.curriculum.select(position, ce, epoch)
        self.metrics.record_curriculum(
            epoch=epoch,
            lam=lambda_schedule(position, self.schedule),
            phi=phi_schedule(position, self.schedule.T),
            active=len(chosen),
            pool=self.manifest.n_s,
        )
        return sorted(chosen)

    # ── one step ──────────────────────────────────────────────────────

    def train_step(self, batch: MixedBatch) -> dict[str, Any]:
        """One optimiser step on a mixed batch; returns the step's metric record."""
        cfg = self.config
        model = self.model
        position = schedule_position(self.state.epoch, self.schedule.T)
        weights = self.weights.model_copy(update={"tau": tau_schedule(position, self.schedule.T)})
        lam = lambda_schedule(position, self.schedule)
        mu = adaptive_scalar(self.state.iteration, self.schedule.N)
        gamma_mu, _ = modulated_scalars(mu, self.perturbation.cfg.gamma, weights.beta)

        source, target = batch.source_items, batch.target_items
        n_src = batch.n_source
        images = self.loader.batch(source + target).to(self.device)
        labels = torch.tensor([r.class_label for r in source], device=self.device)
        model.train()

        # clean branch
        feats, _ = forward_features(model.feature_extractor, images)
        enhanced = enhance(model.enhancer, feats)
        probs = classify(model.classifier, enhanced, training=True)
        focal = focal_loss(probs[:n_src], labels, weights.tau)

        domain_probs = discriminate(model.discriminator, feats, cfg.reversal_scale).softmax(dim=-1)
        dom = domain_adversarial_loss(domain_probs[:n_src, 0], domain_probs[n_src:, 1])
        domain_truth = torch.cat([
            torch.zeros(n_src, dtype=torch.long, device=self.device),
            torch.ones(batch.n_target, dtype=torch.long, device=self.device),
        ])
        disc_correct = int((domain_probs.argmax(dim=-1) == domain_truth).sum().item())

        skd = None
        if cfg.use_skd:
            skd = skd_loss(enhanced[:n_src], self._text_rows(source), self._image_rows(source, images[:n_src]))

        # perturbed branch
        offset = omega = block = None
        retained = 0
        if self.offset_enabled:
            if self.perturbation.cfg.enabled:
                block, hook = self.perturbation.draw(images.shape[0], gamma_mu)
                p_feats, _ = forward_features(model.feature_extractor, images, hooks={block: hook})
            else:
                perm = self.perturbation.draw_pairing(images.shape[0])
                p_feats, _ = forward_features(model.feature_extractor, input_offset(images, perm, gamma_mu))
            p_tilde = classify(model.classifier, enhance(model.enhancer, p_feats), training=True)
            offset, omega, retained = offset_refinement_loss(probs, p_tilde, weights.kappa, omega_draw=self._omega_rng)

        objective = total_objective(
            focal,
            dom,
            skd if skd is not None else 0.0,
            offset if offset is not None else 0.0,
            alpha=weights.alpha if skd is not None else 0.0,
            beta=weights.beta if offset is not None else 0.0,
            mu=mu,
            batch_ids=batch.ids,
        )
        self.optimizer.zero_grad(set_to_none=True)
        objective.backward_target.backward()
        self.optimizer.step()

        record = {
            "epoch": self.state.epoch,
            "step": self.state.iteration,
            "focal": float(focal.detach()),
            "dom": float(dom.detach()),
            "skd": float(skd.detach()) if skd is not None else None,
            "offset": float(offset.detach()) if offset is not None else None,
            "objective": float(objective.loss_for_fc.detach()),
            "mu": mu,
            "tau": weights.tau,
            "lambda": lam,
            "active": len(self.state.active_ids),
            "omega": omega,
            "block": block,
            "retained": retained,
            "disc_acc": disc_correct / images.shape[0],
        }
        self.state.iteration += 1
        self.metrics.record_step(**record)
        return record

    # ── epochs ────────────────────────────────────────────────────────

    def train_epoch(self) -> dict[str, Any]:
        """Iterate once over ``A_t``, then advance ``t`` and refresh ``A_{t+1}``."""
        self.start()
        epoch = self.state.epoch
        active = list(self.state.active_ids)
        steps = self.sampler.steps_per_epoch(len(active))
        totals = {"focal": 0.0, "dom": 0.0, "skd": 0.0, "offset": 0.0}
        disc_hits = seen = 0
        touched: set[str] = set()

        batches = self.sampler.epoch(active)
        for batch in tqdm(batches, total=steps, desc=f"epoch {epoch}", leave=False, disable=not settings.PROGRESS_BAR):
            record = self.train_step(batch)
            touched.update(r.id for r in batch.source_items)
            for key in totals:
                totals[key] += record[key] or 0.0
            disc_hits += round(record["disc_acc"] * batch.batch_size)
            seen += batch.batch_size

        summary = {
            "epoch": epoch,
            "steps": steps,
            "active": len(active),
            "sources_touched": len(touched),
            "iteration": self.state.iteration,
            "disc_acc": disc_hits / seen if seen else None,
            **{f"{key}_mean": value / steps for key, value in totals.items()},
        }
        self.metrics.record_epoch(**summary)
        logger.info(
            "Epoch %d done: steps=%d active=%d focal=%.4f dom=%.4f disc_acc=%.3f",
            epoch, steps, len(active), summary["focal_mean"], summary["dom_mean"], summary["disc_acc"] or 0.0,
        )

        self.state.epoch += 1
        if self.state.epoch < self.config.epochs:
            self.state.active_ids = self._select_active(self.state.epoch)
        return summary

    # ── checkpoints ───────────────────────────────────────────────────

    def train_state_dict(self) -> dict[str, Any]:
        return {
            **self.state.to_dict(),
            "sampler": self.sampler.state_dict(),
            "perturbation_rng": self.perturbation.rng.get_state(),
            "omega_rng": self._omega_rng.get_state(),
            "torch_rng": torch.get_rng_state(),
        }

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(
            path, self.model, self.optimizer, self.config, list(self.manifest.label_space), self.train_state_dict(),
        )

    def resume(self, path: str | Path) -> TrainState:
        """Restore weights, optimiser, RNG streams and ``TrainState`` from *path*."""
        payload = load_checkpoint(path)
        if list(payload["label_space"]) != list(self.manifest.label_space):
            raise CheckpointError(f"checkpoint {path} was trained on a different label space")
        if int(payload["embedding_dim"]) != self.config.embedding_dim:
            raise CheckpointError(f"checkpoint {path} has embedding_dim {payload['embedding_dim']}")
        saved = {k: v for k, v in payload["config"].items() if k not in _RESUMABLE_KEYS}
        current = {k: v for k, v in self.config.model_dump(mode="json").items() if k not in _RESUMABLE_KEYS}
        if saved != current:
            changed = sorted(k for k in current if saved.get(k) != current[k])
            raise CheckpointError(f"checkpoint {path} was written with a different configuration: {changed}")

        restore_model(self.model, payload)
        self.optimizer.load_state_dict(payload["optimizer"])
        ts = payload["train_state"]
        self.state = TrainState.from_dict(ts)
        self.sampler.load_state_dict(ts["sampler"])
        self.perturbation.rng.set_state(ts["perturbation_rng"])
        self._omega_rng.set_state(ts["omega_rng"])
        torch.set_rng_state(ts["torch_rng"])
        self._started = True
        logger.info("Resumed from %s at epoch %d (iteration %d)", path, self.state.epoch, self.state.iteration)
        return self.state

    def fit(self, out_dir: str | Path, resume: Optional[str | Path] = None) -> FitResult:
        """Run the remaining epochs, checkpointing every ``checkpoint_every`` epochs."""
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        if resume is not None:
            self.resume(resume)
        self.start()

        logger.info("Training %r", self)
        final = out_dir / "final.pt"
        remaining = range(self.state.epoch, self.config.epochs)
        for _ in tqdm(remaining, desc="training", disable=not settings.PROGRESS_BAR):
            self.train_epoch()
            if self.state.epoch % self.config.checkpoint_every == 0:
                self.save(ckpt_dir / f"epoch_{self.state.epoch:03d}.pt")
        self.save(final)
        return FitResult(final, self.metrics.path, self.state)
