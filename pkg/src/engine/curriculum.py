"""
Curriculum & Adaptive Schedules
───────────────────────────────
Difficulty scoring of source samples, per-epoch subset selection, and the
time-varying scalars that drive training:

* ``lambda_schedule``: fraction of the source pool in play at epoch t
* ``tau_schedule``   : focal focusing parameter, linear 0 → 5
* ``phi_schedule``   : weight of the dynamic (loss-based) score, linear 0 → 1
* ``adaptive_scalar``: μ(n), a quarter-sine ramp over the first N iterations
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Iterable, Optional, Sequence

import torch

from src.config.settings import settings
from src.models.models import WeatherCondition
from src.models.schemas import DifficultyScore, SampleRecord, TrainSchedule

logger = logging.getLogger(__name__)


# ── prior & difficulty scores ─────────────────────────────────────────

def weather_weight(weather: WeatherCondition | str) -> float:
    return float(settings.WEATHER_WEIGHTS[WeatherCondition.parse(weather).value])


def prior_score(iqa: float, weather: WeatherCondition | str) -> float:
    """IQA score scaled by the weather weight over the maximum weight."""
    if not 0.0 <= iqa <= 1.0:
        raise ValueError(f"iqa score {iqa} outside [0, 1]")
    return iqa * weather_weight(weather) / settings.MAX_WEATHER_WEIGHT


def record_prior(record: SampleRecord) -> float:
    """Prior for a source record: stored ``prior_score`` if present, else computed."""
    if record.prior_score is not None:
        return record.prior_score
    quality = record.prior_quality
    if quality is None:
        logger.warning("Record %s has no prior_quality; using 1.0", record.id)
        quality = 1.0
    return prior_score(quality, record.weather)


def normalize_ce(ce: torch.Tensor) -> torch.Tensor:
    """Min-max normalise pool losses to [0, 1]; a constant pool maps to 0.5."""
    ce = ce.detach().double()
    lo, hi = ce.min(), ce.max()
    if float(hi - lo) <= 0.0:
        return torch.full_like(ce, 0.5)
    return (ce - lo) / (hi - lo)


def difficulty_score(prior: float, ce_norm: float, phi: float) -> float:
    """``(1 - phi) * prior + phi * (1 - ce_norm)``."""
    if not 0.0 <= phi <= 1.0:
        raise ValueError("phi must lie in [0, 1]")
    return (1.0 - phi) * prior + phi * (1.0 - ce_norm)


def score_pool(
    sample_ids: Sequence[str],
    priors: Sequence[float],
    per_sample_ce: Optional[torch.Tensor],
    phi: float,
) -> list[DifficultyScore]:
    """Blend priors with pool-normalised losses (losses may be omitted when ``phi = 0``)."""
    if len(sample_ids) != len(priors):
        raise ValueError("sample_ids and priors differ in length")
    if per_sample_ce is None:
        if phi != 0.0:
            raise ValueError("per-sample losses are required when phi > 0")
        dynamic = [0.5] * len(sample_ids)
    else:
        if per_sample_ce.numel() != len(sample_ids):
            raise ValueError("per_sample_ce does not cover the pool")
        dynamic = (1.0 - normalize_ce(per_sample_ce)).tolist()
    return [
        DifficultyScore(
            sample_id=sid,
            prior=float(prior),
            dynamic=float(dyn),
            blended=difficulty_score(float(prior), 1.0 - float(dyn), phi),
        )
        for sid, prior, dyn in zip(sample_ids, priors, dynamic)
    ]


# ── schedules ─────────────────────────────────────────────────────────

def lambda_schedule(t: float, sched: TrainSchedule) -> float:
    """``lambda0 + (1 - lambda0) * (1 - exp(-k t / T))``."""
    return sched.lambda0 + (1.0 - sched.lambda0) * (1.0 - math.exp(-sched.k * t / sched.T))


def tau_schedule(t: float, T: int) -> float:
    return settings.TAU_MAX * t / T


def phi_schedule(t: float, T: int) -> float:
    return min(1.0, max(0.0, t / T))


def adaptive_scalar(n: int, N: int) -> float:
    """``sin(pi n / 2N)`` for ``n < N``, else 1."""
    if n < 0:
        raise ValueError("iteration must be >= 0")
    if n >= N:
        return 1.0
    return math.sin(math.pi * n / (2 * N))


def modulated_scalars(mu: float, gamma_base: float, beta_base: float) -> tuple[float, float]:
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    return mu * gamma_base, mu * beta_base


def schedule_position(epoch: int, T: int) -> float:
    """Map epoch index 0..T-1 onto 0..T so the final epoch sees the end-of-schedule values."""
    if T <= 1:
        return 0.0
    return epoch * T / (T - 1)


# ── selection ─────────────────────────────────────────────────────────

def subset_size(t: float, sched: TrainSchedule, pool_size: int) -> int:
    # Round before ceil so float noise in lambda * |A| does not add a sample.
    return min(pool_size, math.ceil(round(lambda_schedule(t, sched) * pool_size, 9)))


def select_subset(scores: Sequence[DifficultyScore], t: float, sched: TrainSchedule) -> set[str]:
    """Top ``ceil(lambda(t) * |A|)`` samples by blended score; ties by ascending id."""
    if not scores:
        raise ValueError("cannot select from an empty score list")
    count = subset_size(t, sched, len(scores))
    ranked = sorted(scores, key=lambda s: (-s.blended, s.sample_id))
    return {s.sample_id for s in ranked[:count]}


class CurriculumEngine:
    """Tracks the source pool's priors and produces the active subset per epoch."""

    def __init__(self, source_records: Iterable[SampleRecord], sched: TrainSchedule,
                 score_dump: Optional[str | Path] = None) -> None:
        records = sorted(source_records, key=lambda r: r.id)
        if not records:
            raise ValueError("curriculum needs at least one source record")
        self._ids = [r.id for r in records]
        self._priors = [record_prior(r) for r in records]
        self._sched = sched
        self._dump = Path(score_dump) if score_dump else None
        self.last_scores: list[DifficultyScore] = []

    @property
    def pool_ids(self) -> list[str]:
        return list(self._ids)

    def select(self, t: float, per_sample_ce: Optional[torch.Tensor], epoch: int) -> set[str]:
        phi = phi_schedule(t, self._sched.T)
        scores = score_pool(self._ids, self._priors, per_sample_ce if phi > 0 else None, phi)
        chosen = select_subset(scores, t, self._sched)
        self.last_scores = scores
        logger.info(
            "Curriculum epoch %d: lambda=%.4f phi=%.3f active=%d/%d",
            epoch, lambda_schedule(t, self._sched), phi, len(chosen), len(self._ids),
        )
        if self._dump is not None:
            self._write_dump(scores, chosen, epoch)
        return chosen

    def _write_dump(self, scores: Sequence[DifficultyScore], chosen: set[str], epoch: int) -> None:
        self._dump.parent.mkdir(parents=True, exist_ok=True)
        with self._dump.open("a", encoding="utf-8") as fh:
            for s in scores:
                fh.write(json.dumps({
                    "epoch": epoch,
                    "id": s.sample_id,
                    "prior": s.prior,
                    "dynamic": s.dynamic,
                    "blended": s.blended,
                    "selected": s.sample_id in chosen,
                }, sort_keys=True) + "\n")
