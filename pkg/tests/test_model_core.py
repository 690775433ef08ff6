from __future__ import annotations

import pytest
import torch

from conftest import TINY_D_E
from src.engine.errors import CheckpointError
from src.engine.losses import domain_adversarial_loss
from src.engine.model_core import (
    build_model,
    classify,
    discriminate,
    enhance,
    forward_features,
    grad_reverse,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)


@pytest.fixture
def model(config):
    torch.manual_seed(0)
    return build_model(config, num_classes=5, embedding_dim=TINY_D_E)


def _images(n=4, size=16, seed=0):
    return torch.rand(n, 3, size, size, generator=torch.Generator().manual_seed(seed))


def test_grad_reverse_is_identity_forward_and_negated_backward():
    x = torch.randn(5, 3, requires_grad=True)
    y = grad_reverse(x, 1.0)
    assert torch.equal(y, x)
    y.sum().backward()
    assert torch.equal(x.grad, -torch.ones(5, 3))


def test_reversed_domain_gradient_into_features_is_negated(model):
    feats = model.feature_extractor(_images()).final_feature.detach()

    def dom_grad(reverse: bool) -> torch.Tensor:
        f = feats.clone().requires_grad_(True)
        logits = discriminate(model.discriminator, f) if reverse else model.discriminator.net(f)
        q = logits.softmax(dim=-1)
        domain_adversarial_loss(q[:2, 0], q[2:, 1]).backward()
        return f.grad

    assert torch.allclose(dom_grad(True), -dom_grad(False), atol=1e-6)


def test_reversal_negates_domain_gradient_on_every_feature_parameter(model):
    model.eval()
    images = _images()

    def feature_grads(reverse: bool) -> dict[str, torch.Tensor]:
        model.zero_grad(set_to_none=True)
        feat = model.feature_extractor(images).final_feature
        logits = discriminate(model.discriminator, feat) if reverse else model.discriminator.net(feat)
        q = logits.softmax(dim=-1)
        domain_adversarial_loss(q[:2, 0], q[2:, 1]).backward()
        return {
            name: p.grad.clone()
            for name, p in model.feature_extractor.named_parameters()
            if p.grad is not None
        }

    reversed_grads, plain_grads = feature_grads(True), feature_grads(False)
    assert reversed_grads and set(reversed_grads) == set(plain_grads)
    for name, grad in plain_grads.items():
        assert torch.allclose(reversed_grads[name], -grad, atol=1e-6), name


def test_identity_hooks_leave_outputs_bitwise_equal(model):
    model.eval()
    clean, clean_blocks = forward_features(model.feature_extractor, _images(), record_blocks=[0, 1])
    hooked, hooked_blocks = forward_features(
        model.feature_extractor, _images(), record_blocks=[0, 1], hooks={0: lambda x: x, 1: lambda x: x},
    )
    assert torch.equal(clean, hooked)
    assert all(torch.equal(clean_blocks[b].data, hooked_blocks[b].data) for b in (0, 1))


def test_forward_shapes_and_recorded_blocks(model):
    feat, blocks = forward_features(model.feature_extractor, _images(), record_blocks=[0, 1])
    assert feat.shape == (4, 32)
    assert set(blocks) == {0, 1}
    # 16x16 input with 8x8 patches: 4 patch tokens plus the class token
    assert blocks[1].shape == (4, 5, 32)

    enhanced = enhance(model.enhancer, feat)
    probs = classify(model.classifier, enhanced, training=False)
    assert enhanced.shape == (4, TINY_D_E)
    assert torch.allclose(probs.sum(dim=-1), torch.ones(4), atol=1e-6)


def test_hook_replaces_block_input(model):
    seen = {}

    def hook(tokens):
        seen["shape"] = tuple(tokens.shape)
        return tokens * 0.0

    zeroed, _ = forward_features(model.feature_extractor, _images(), hooks={0: hook})
    clean, _ = forward_features(model.feature_extractor, _images())
    assert seen["shape"] == (4, 5, 32)
    assert not torch.allclose(zeroed, clean)


def test_wrong_resolution_is_rejected(model):
    with pytest.raises(ValueError):
        model.feature_extractor(_images(size=24))


def test_predict_is_deterministic_and_restores_mode(model):
    model.train()
    a = model.predict(_images())
    b = model.predict(_images())
    assert torch.equal(a, b)
    assert model.training


def test_checkpoint_round_trip(model, config, tmp_path):
    path = save_checkpoint(tmp_path / "ck.pt", model, None, config, ["a", "b", "c", "d", "e"], {"epoch": 1})
    payload = load_checkpoint(path)
    rebuilt, rebuilt_config = model_from_checkpoint(payload)

    assert rebuilt_config.depth == config.depth
    assert torch.equal(rebuilt.predict(_images()), model.predict(_images()))


def test_corrupt_checkpoint_is_refused(tmp_path):
    path = tmp_path / "bad.pt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_checkpoint_is_refused(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "absent.pt")
