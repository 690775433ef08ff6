"""
Loss terms for adversarial adaptation with teacher distillation and
perturbation consistency.  All functions take probabilities (post-softmax),
not logits, and stabilise logs / norms with ``settings.EPSILON``.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Optional, Sequence, TypeVar

import torch
import torch.nn.functional as F

from src.config.settings import settings
from src.engine.errors import NonFiniteLossError

EPS = settings.EPSILON
T = TypeVar("T")


def _reduce(values: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "mean":
        return values.mean()
    if reduction == "sum":
        return values.sum()
    if reduction == "none":
        return values
    raise ValueError(f"unknown reduction '{reduction}'")


def _target_prob(p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if p.dim() == 1:
        p, y = p.unsqueeze(0), torch.as_tensor(y).reshape(1)
    y = torch.as_tensor(y, device=p.device).long().reshape(-1)
    return p.gather(1, y.unsqueeze(1)).squeeze(1)


def cross_entropy(p: torch.Tensor, y: torch.Tensor | int, reduction: str = "mean") -> torch.Tensor:
    """``-log p_y`` with ``p_y`` clamped below at ``EPSILON``."""
    p_y = _target_prob(p, y)
    return _reduce(-torch.log(p_y.clamp_min(EPS)), reduction)


def focal_loss(p: torch.Tensor, y: torch.Tensor | int, tau: float, reduction: str = "mean") -> torch.Tensor:
    """``(1 - p_y)^tau * -log p_y``; identical to cross-entropy at ``tau = 0``."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    p_y = _target_prob(p, y)
    ce = -torch.log(p_y.clamp_min(EPS))
    if tau == 0:
        return _reduce(ce, reduction)
    return _reduce((1.0 - p_y).clamp_min(0.0).pow(tau) * ce, reduction)


def domain_adversarial_loss(q_source: torch.Tensor, q_target: torch.Tensor) -> torch.Tensor:
    """``-E_s[log q_s] - E_t[log q_t]`` over within-batch means.

    *q_source* holds the probability of "source" on source items, *q_target*
    the probability of "target" on target items.
    """
    if q_source.numel() == 0 or q_target.numel() == 0:
        raise ValueError("domain loss needs at least one source and one target item")
    return -torch.log(q_source.clamp_min(EPS)).mean() - torch.log(q_target.clamp_min(EPS)).mean()


def skd_loss(enhanced: torch.Tensor, text_emb: torch.Tensor, image_emb: torch.Tensor) -> torch.Tensor:
    """Negative mean of the two cosine similarities; lies in [-2, 2]."""
    if not (enhanced.shape == text_emb.shape == image_emb.shape):
        raise ValueError(
            f"shape mismatch: enhanced {tuple(enhanced.shape)}, text {tuple(text_emb.shape)}, "
            f"image {tuple(image_emb.shape)}"
        )
    cos_t = F.cosine_similarity(enhanced, text_emb, dim=-1, eps=EPS)
    cos_i = F.cosine_similarity(enhanced, image_emb, dim=-1, eps=EPS)
    return -(cos_t + cos_i).mean().clamp(-2.0, 2.0)


def kl_divergence(p: torch.Tensor, q: torch.Tensor, reduction: str = "none") -> torch.Tensor:
    """Row-wise ``KL(p || q)``."""
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    terms = p * (torch.log(p.clamp_min(EPS)) - torch.log(q.clamp_min(EPS)))
    return _reduce(terms.sum(dim=-1).clamp_min(0.0), reduction)


def confidence_mask(probs: torch.Tensor, kappa: float) -> torch.Tensor:
    """Boolean mask of rows whose max probability exceeds *kappa*."""
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    return probs.detach().max(dim=-1).values > kappa


def confidence_filter(batch: Sequence[T], probs: torch.Tensor, kappa: float) -> list[T]:
    mask = confidence_mask(probs, kappa).tolist()
    if len(mask) != len(batch):
        raise ValueError("batch and probabilities differ in length")
    return [item for item, keep in zip(batch, mask) if keep]


class OffsetLoss(NamedTuple):
    loss: torch.Tensor
    omega: int
    retained: int


def offset_refinement_loss(
    p: torch.Tensor,
    p_tilde: torch.Tensor,
    kappa: float,
    omega_draw: Optional[torch.Generator] = None,
    omega: Optional[int] = None,
) -> OffsetLoss:
    """Symmetric-by-chance KL consistency between clean and perturbed predictions.

    ``omega`` ~ Bernoulli(0.5) is drawn once per batch from *omega_draw*
    unless fixed explicitly. With ``omega = 1`` the loss is the mean of
    ``KL(p || p_tilde)`` over rows passing the confidence filter on ``p``;
    otherwise ``KL(p_tilde || p)`` over rows passing the filter on
    ``p_tilde``.  Gradients flow through both distributions.
    """
    if omega is None:
        omega = int(torch.rand((), generator=omega_draw).item() < 0.5)
    if omega == 1:
        mask = confidence_mask(p, kappa)
        kl = kl_divergence(p, p_tilde)
    else:
        mask = confidence_mask(p_tilde, kappa)
        kl = kl_divergence(p_tilde, p)
    retained = int(mask.sum().item())
    if retained == 0:
        return OffsetLoss((p.sum() + p_tilde.sum()) * 0.0, omega, 0)
    return OffsetLoss(kl[mask].mean(), omega, retained)


class Objective(NamedTuple):
    """``loss_for_fc`` carries the algebraic value ``focal - dom + ...``;
    ``loss_for_d`` is ``dom`` with its graph through the gradient reversal.

    Back-propagating ``backward_target`` once updates D to minimise ``dom``
    and F (through the reversal) to maximise it.
    """

    loss_for_fc: torch.Tensor
    loss_for_d: torch.Tensor

    @property
    def backward_target(self) -> torch.Tensor:
        return self.loss_for_fc + self.loss_for_d


def _check_finite(name: str, value: torch.Tensor | float, batch_ids: Sequence[str]) -> None:
    scalar = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(scalar):
        raise NonFiniteLossError(name, batch_ids)


def total_objective(
    focal: torch.Tensor,
    dom: torch.Tensor,
    skd: torch.Tensor | float,
    offset: torch.Tensor | float,
    alpha: float,
    beta: float,
    mu: float,
    batch_ids: Sequence[str] = (),
) -> Objective:
    if not 0.0 <= mu <= 1.0:
        raise ValueError("mu must lie in [0, 1]")
    for name, value in (("focal", focal), ("dom", dom), ("skd", skd), ("offset", offset)):
        _check_finite(name, value, batch_ids)

    loss_for_fc = focal - dom.detach()
    if alpha:
        loss_for_fc = loss_for_fc + alpha * skd
    if mu * beta:
        loss_for_fc = loss_for_fc + (mu * beta) * offset
    return Objective(loss_for_fc=loss_for_fc, loss_for_d=dom)
