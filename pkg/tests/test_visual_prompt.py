from collections import OrderedDict

import pytest
import torch

from pfedpt import (
    Gradients,
    PromptSpec,
    TemplateMask,
    apply_prompt,
    build_model,
    init_prompt,
    prompt_grad_step,
    prompt_param_count,
)
from pfedpt.numerics import PROMPT_PARAMETER_NAME, backward, forward_loss
from pfedpt.visual_prompt import PromptState


def test_padding_count_on_cifar():
    assert prompt_param_count(PromptSpec("padding", 4, (3, 32, 32))) == 1344


@pytest.mark.parametrize("template", ["patch-fixed", "patch-random"])
def test_patch_count(template):
    assert prompt_param_count(PromptSpec(template, 4, (3, 32, 32))) == 48


@pytest.mark.parametrize("template", ["padding", "patch-fixed", "patch-random"])
def test_zero_size(template):
    spec = PromptSpec(template, 0, (3, 32, 32))
    assert prompt_param_count(spec) == 0
    assert TemplateMask.from_spec(spec).popcount == 0


def test_padding_popcount():
    assert TemplateMask.from_spec(PromptSpec("padding", 4, (3, 32, 32))).popcount == 448


@pytest.mark.parametrize("shape", [(3, 32, 32), (1, 9, 12), (2, 7, 7)])
@pytest.mark.parametrize("template", ["padding", "patch-fixed", "patch-random"])
def test_count_matches_mask_exhaustively(shape, template):
    channels, height, width = shape
    for p in range(min(height, width) // 2):
        spec = PromptSpec(template, p, shape)
        mask = TemplateMask.from_spec(spec)
        assert channels * mask.popcount == prompt_param_count(spec)
        assert init_prompt(spec).num_parameters == prompt_param_count(spec)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"template": "padding", "size": 16},
        {"template": "patch-fixed", "size": 33},
        {"template": "frame", "size": 2},
        {"template": "padding", "size": -1},
        {"template": "padding", "size": 2, "mode": "multiply"},
    ],
)
def test_invalid_spec(kwargs):
    with pytest.raises(ValueError):
        PromptSpec(image_shape=(3, 32, 32), **kwargs)


class TestApplyPrompt:
    def test_identity_at_init(self):
        x = torch.randn(4, 3, 32, 32)
        for template in ("padding", "patch-fixed", "patch-random"):
            state = init_prompt(PromptSpec(template, 4, (3, 32, 32)))
            assert torch.equal(apply_prompt(x, state, rng=torch.Generator().manual_seed(0)), x)

    def test_interior_untouched(self):
        state = init_prompt(PromptSpec("padding", 4, (3, 32, 32)))
        with torch.no_grad():
            state.delta[state.support] = torch.randn(state.num_parameters)
        x = torch.randn(2, 3, 32, 32)
        prompted = apply_prompt(x, state)
        assert torch.equal(prompted[:, :, 4:28, 4:28], x[:, :, 4:28, 4:28])
        assert not torch.equal(prompted[:, :, :4, :], x[:, :, :4, :])

    def test_unit_prompt_on_zero_image_is_mask(self):
        spec = PromptSpec("padding", 4, (3, 32, 32))
        state = init_prompt(spec)
        with torch.no_grad():
            state.delta[state.support] = 1.0
        prompted = apply_prompt(torch.zeros(1, 3, 32, 32), state)
        mask = TemplateMask.from_spec(spec).grid.to(torch.float32)
        for channel in range(3):
            assert torch.equal(prompted[0, channel], mask)

    def test_patch_fixed_is_top_left(self):
        state = init_prompt(PromptSpec("patch-fixed", 3, (1, 8, 8)))
        with torch.no_grad():
            state.delta[state.support] = 2.0
        prompted = apply_prompt(torch.zeros(1, 1, 8, 8), state)
        assert torch.equal(prompted[0, 0, :3, :3], torch.full((3, 3), 2.0))
        assert prompted.sum() == 18.0

    def test_patch_random_moves_with_rng(self):
        state = init_prompt(PromptSpec("patch-random", 2, (1, 16, 16)))
        with torch.no_grad():
            state.delta[state.support] = 1.0
        x = torch.zeros(1, 1, 16, 16)
        first = apply_prompt(x, state, rng=torch.Generator().manual_seed(0))
        again = apply_prompt(x, state, rng=torch.Generator().manual_seed(0))
        assert torch.equal(first, again)
        assert first.sum() == 4.0
        anchors = {
            tuple(apply_prompt(x, state, rng=torch.Generator().manual_seed(s))[0, 0].nonzero()[0].tolist())
            for s in range(20)
        }
        assert len(anchors) > 1

    def test_patch_random_needs_rng(self):
        state = init_prompt(PromptSpec("patch-random", 2, (1, 16, 16)))
        with pytest.raises(ValueError, match="rng"):
            apply_prompt(torch.zeros(1, 1, 16, 16), state)

    def test_replace_mode(self):
        state = init_prompt(PromptSpec("padding", 1, (1, 4, 4), mode="replace"))
        with torch.no_grad():
            state.delta[state.support] = 5.0
        x = torch.ones(1, 1, 4, 4)
        prompted = apply_prompt(x, state)
        assert prompted[0, 0, 0, 0] == 5.0
        assert prompted[0, 0, 1, 1] == 1.0

    def test_shape_mismatch(self):
        state = init_prompt(PromptSpec("padding", 2, (3, 32, 32)))
        with pytest.raises(ValueError, match="shape"):
            apply_prompt(torch.zeros(1, 3, 28, 28), state)


class TestPromptGradStep:
    def test_zero_learning_rate(self):
        state = init_prompt(PromptSpec("padding", 2, (3, 8, 8)))
        grad = state.support.to(torch.float32)
        prompt_grad_step(state, grad, 0.0)
        assert torch.equal(state.delta, torch.zeros(3, 8, 8))

    def test_constant_gradient_step(self):
        state = init_prompt(PromptSpec("padding", 2, (3, 8, 8)))
        grad = state.support.to(torch.float32) * 0.25
        prompt_grad_step(state, Gradients(OrderedDict([(PROMPT_PARAMETER_NAME, grad)])), 1.0)
        assert torch.equal(state.delta[state.support], torch.full((state.num_parameters,), -0.25))
        assert torch.equal(state.delta[~state.support], torch.zeros(int((~state.support).sum())))

    def test_gradient_off_mask(self):
        state = init_prompt(PromptSpec("padding", 2, (3, 8, 8)))
        with pytest.raises(ValueError, match="outside"):
            prompt_grad_step(state, torch.ones(3, 8, 8), 1.0)

    def test_mask_closure_after_training(self, mlp_config, batch):
        model = build_model(mlp_config)
        x, y = batch
        for template in ("padding", "patch-fixed", "patch-random"):
            state = init_prompt(PromptSpec(template, 2, (3, 8, 8)))
            rng = torch.Generator().manual_seed(0)
            for _ in range(5):
                context = forward_loss(model, x, y, prompt=state, rng=rng)
                grads = backward(model, context, parameters=OrderedDict([(PROMPT_PARAMETER_NAME, state.delta)]))
                prompt_grad_step(state, grads, 1.0)
            assert torch.equal(state.delta.detach()[~state.support], torch.zeros(int((~state.support).sum())))
            assert state.delta.detach()[state.support].abs().sum() > 0


def test_prompted_forward_is_bit_identical_at_init(mlp_config, batch):
    model = build_model(mlp_config)
    x, y = batch
    state = init_prompt(PromptSpec("padding", 2, (3, 8, 8)))
    raw = forward_loss(model, x, y)
    prompted = forward_loss(model, x, y, prompt=state)
    assert torch.equal(raw.logits, prompted.logits)
    assert torch.equal(raw.loss, prompted.loss)


def test_init_is_deterministic():
    spec = PromptSpec("patch-random", 3, (3, 16, 16))
    first, second = init_prompt(spec), init_prompt(spec)
    assert torch.equal(first.delta, second.delta)
    assert torch.equal(first.mask.grid, second.mask.grid)


class TestPromptCheckpoint:
    def test_round_trip(self, tmp_path):
        state = init_prompt(PromptSpec("padding", 2, (3, 8, 8)), owner=3)
        with torch.no_grad():
            state.delta[state.support] = torch.linspace(-1, 1, state.num_parameters)
        path = tmp_path / "client_3_prompt.pfpt"
        state.save(path)
        loaded = PromptState.load(path)
        assert loaded.spec == state.spec
        assert loaded.owner == 3
        assert torch.equal(loaded.delta, state.delta.detach())

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "garbage.pfpt"
        path.write_bytes(b"XXXX")
        with pytest.raises(ValueError, match="magic"):
            PromptState.load(path)
