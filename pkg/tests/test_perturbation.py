from __future__ import annotations

from collections import Counter

import pytest
import torch

from src.engine.perturbation import (
    OffsetHook,
    PerturbationPlan,
    input_offset,
    pair_within_batch,
    select_block,
    token_offset,
)
from src.models.schemas import PerturbationConfig


def _readout(tokens: torch.Tensor) -> torch.Tensor:
    weights = torch.linspace(-1.0, 1.0, tokens.numel(), dtype=tokens.dtype).reshape(tokens.shape)
    return (torch.sin(tokens) * weights).sum()


def test_offset_value():
    s_i, s_j = torch.zeros(2, 3), torch.ones(2, 3)
    assert torch.allclose(token_offset(s_i, s_j, 0.2), torch.full((2, 3), 0.2))


def test_offset_blocks_gradient_to_partner():
    s_i = torch.randn(3, 5, 4, dtype=torch.float64, requires_grad=True)
    s_j = torch.randn(3, 5, 4, dtype=torch.float64, requires_grad=True)
    _readout(token_offset(s_i, s_j, 0.3)).backward()
    assert s_j.grad is None or torch.count_nonzero(s_j.grad) == 0


def test_offset_gradient_to_self_matches_finite_differences():
    gen = torch.Generator().manual_seed(0)
    s_i = torch.randn(2, 3, 4, dtype=torch.float64, generator=gen)
    s_j = torch.randn(2, 3, 4, dtype=torch.float64, generator=gen)
    gamma = 0.3

    x = s_i.clone().requires_grad_(True)
    _readout(token_offset(x, s_j, gamma)).backward()
    analytic = x.grad

    # s_j - s_i is a constant in the backward pass, so the reference
    # derivative holds the offset fixed at its current value.
    offset = gamma * (s_j - s_i)
    eps = 1e-6
    numeric = torch.zeros_like(s_i)
    flat = numeric.view(-1)
    for idx in range(s_i.numel()):
        bump = torch.zeros_like(s_i).view(-1)
        bump[idx] = eps
        bump = bump.view_as(s_i)
        flat[idx] = (_readout(s_i + bump + offset) - _readout(s_i - bump + offset)) / (2 * eps)

    rel = (analytic - numeric).abs().max() / numeric.abs().max()
    assert rel.item() < 1e-3


def test_zero_gamma_is_identity():
    s = torch.randn(2, 3)
    assert token_offset(s, torch.randn(2, 3), 0.0) is s


def test_offset_shape_mismatch():
    with pytest.raises(ValueError):
        token_offset(torch.zeros(2, 3), torch.zeros(3, 3), 0.2)


@pytest.mark.parametrize("batch_size", [2, 3, 16])
def test_pairing_is_a_derangement(batch_size):
    gen = torch.Generator().manual_seed(batch_size)
    for _ in range(50):
        perm = pair_within_batch(batch_size, gen)
        assert sorted(perm.tolist()) == list(range(batch_size))
        assert all(perm[i] != i for i in range(batch_size))


def test_pairing_needs_two_items():
    with pytest.raises(ValueError):
        pair_within_batch(1, torch.Generator())


def test_block_selection_is_uniform_over_configured_blocks():
    cfg = PerturbationConfig(alternate_blocks=[0, 4, 8])
    gen = torch.Generator().manual_seed(7)
    counts = Counter(select_block(cfg, gen) for _ in range(3000))
    assert set(counts) == {0, 4, 8}
    assert all(800 < c < 1200 for c in counts.values())


def test_block_outside_depth_is_rejected():
    with pytest.raises(ValueError):
        PerturbationConfig(alternate_blocks=[0, 12], depth=12)


def test_hook_and_input_offset_pair_rows():
    x = torch.arange(3, dtype=torch.float32).reshape(3, 1) * torch.ones(3, 2)
    perm = torch.tensor([1, 2, 0])
    expected = x + 0.5 * (x[perm] - x)
    assert torch.allclose(OffsetHook(perm, 0.5)(x), expected)
    assert torch.allclose(input_offset(x, perm, 0.5), expected)


def test_plan_is_reproducible_from_seed():
    cfg = PerturbationConfig(alternate_blocks=[0, 1, 2], depth=4)
    a = PerturbationPlan(cfg, torch.Generator().manual_seed(11))
    b = PerturbationPlan(cfg, torch.Generator().manual_seed(11))
    for _ in range(5):
        (block_a, hook_a), (block_b, hook_b) = a.draw(6, 0.1), b.draw(6, 0.1)
        assert block_a == block_b
        assert torch.equal(hook_a.perm, hook_b.perm)
