"""
Hidden-token perturbation
─────────────────────────
Random offsets toward another image's token sequence at one randomly chosen
transformer block per batch.  The offset direction is detached, so gradients
reach only the perturbed sample's own tokens.
"""

from __future__ import annotations

import logging

import torch

from src.models.schemas import PerturbationConfig

logger = logging.getLogger(__name__)

_MAX_DERANGEMENT_TRIES = 10_000


def select_block(cfg: PerturbationConfig, rng: torch.Generator) -> int:
    """Uniform draw over ``cfg.alternate_blocks``."""
    blocks = sorted(cfg.alternate_blocks)
    if not blocks:
        raise ValueError("alternate_blocks is empty")
    index = int(torch.randint(len(blocks), (1,), generator=rng).item())
    return blocks[index]


def token_offset(s_i: torch.Tensor, s_j: torch.Tensor, gamma_mu: float) -> torch.Tensor:
    """``s_i + gamma_mu * (s_j - s_i)`` with the offset term treated as constant."""
    if s_i.shape != s_j.shape:
        raise ValueError(f"token sequence shapes differ: {tuple(s_i.shape)} vs {tuple(s_j.shape)}")
    if gamma_mu == 0:
        return s_i
    return s_i + gamma_mu * (s_j - s_i).detach()


def pair_within_batch(batch_size: int, rng: torch.Generator) -> torch.Tensor:
    """Random derangement: ``perm[i] != i`` for every ``i``."""
    if batch_size < 2:
        raise ValueError("pairing needs a batch of at least 2 items")
    positions = torch.arange(batch_size)
    for _ in range(_MAX_DERANGEMENT_TRIES):
        perm = torch.randperm(batch_size, generator=rng)
        if not bool((perm == positions).any()):
            return perm
    # Unreachable in practice (each try succeeds with probability ~1/e).
    raise RuntimeError("failed to draw a derangement")


class OffsetHook:
    """Block-input hook applying ``token_offset`` against partner rows ``perm``."""

    def __init__(self, perm: torch.Tensor, gamma_mu: float) -> None:
        self.perm = perm
        self.gamma_mu = gamma_mu

    def __call__(self, tokens: torch.Tensor) -> torch.Tensor:
        return token_offset(tokens, tokens[self.perm.to(tokens.device)], self.gamma_mu)


def input_offset(images: torch.Tensor, perm: torch.Tensor, gamma_mu: float) -> torch.Tensor:
    """The same offset applied to raw pixels (input-space ablation)."""
    return token_offset(images, images[perm.to(images.device)], gamma_mu)


class PerturbationPlan:
    """One block + one pairing drawn per batch."""

    def __init__(self, cfg: PerturbationConfig, rng: torch.Generator) -> None:
        self.cfg = cfg
        self.rng = rng

    def draw(self, batch_size: int, gamma_mu: float) -> tuple[int, OffsetHook]:
        block = select_block(self.cfg, self.rng)
        perm = pair_within_batch(batch_size, self.rng)
        logger.debug("Perturbing block %d (gamma_mu=%.4f)", block, gamma_mu)
        return block, OffsetHook(perm, gamma_mu)

    def draw_pairing(self, batch_size: int) -> torch.Tensor:
        return pair_within_batch(batch_size, self.rng)
