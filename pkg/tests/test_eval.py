import numpy as np
import pytest
import torch

from pfedpt import PromptSpec, build_model, flatten_params, init_prompt
from training.eval import (
    distribution_similarity,
    drift_series,
    evaluate_client,
    export_embeddings,
    finetune_new_client,
    predict,
    prompt_distance_matrix,
    prompt_drift,
    pure_color_images,
    pure_color_probe,
)
from training.federated import RoundReport


def constant_model(config, label):
    model = build_model(config)
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
        model.head.bias[label] = 1.0
    return model


class TestEvaluateClient:
    def test_constant_prediction_scores_class_frequency(self, mlp_config, batch):
        x, _ = batch
        y = torch.tensor([2, 2, 0, 1, 2, 3])
        assert evaluate_client(constant_model(mlp_config, 2), x, y) == pytest.approx(0.5)

    def test_zero_prompt_changes_nothing(self, mlp_config, synthetic, prompt_spec):
        _, test = synthetic
        model = build_model(mlp_config)
        raw = evaluate_client(model, test.images, test.labels)
        prompted = evaluate_client(model, test.images, test.labels, prompt=init_prompt(prompt_spec))
        assert raw == prompted

    def test_loads_given_params(self, mlp_config, batch):
        x, _ = batch
        y = torch.full((x.shape[0],), 1)
        params = flatten_params(constant_model(mlp_config, 1))
        assert evaluate_client(build_model(mlp_config), x, y, params=params) == 1.0

    def test_order_does_not_matter(self, mlp_config, synthetic):
        _, test = synthetic
        model = build_model(mlp_config)
        prompt = init_prompt(PromptSpec("patch-random", 3, (3, 8, 8)))
        with torch.no_grad():
            prompt.delta[prompt.support] = torch.linspace(-2, 2, prompt.num_parameters)
        perm = torch.randperm(test.labels.numel(), generator=torch.Generator().manual_seed(0))
        first = evaluate_client(model, test.images, test.labels, prompt=prompt, rng=torch.Generator().manual_seed(4))
        second = evaluate_client(
            model, test.images[perm], test.labels[perm], prompt=prompt, rng=torch.Generator().manual_seed(4)
        )
        assert first == second

    def test_empty_shard(self, mlp_config):
        with pytest.raises(ValueError, match="empty"):
            evaluate_client(build_model(mlp_config), torch.zeros(0, 3, 8, 8), torch.zeros(0, dtype=torch.long))


class TestPromptDrift:
    def test_identical_prompts(self, prompt_spec):
        prompt = init_prompt(prompt_spec)
        with torch.no_grad():
            prompt.delta[prompt.support] = 0.7
        assert prompt_drift(prompt, prompt.clone()) == 0.0

    def test_constant_shift(self, prompt_spec):
        before = init_prompt(prompt_spec)
        after = before.clone()
        with torch.no_grad():
            after.delta[after.support] += 0.25
        assert prompt_drift(before, after) == pytest.approx(0.25)

    def test_empty_prompt(self):
        empty = init_prompt(PromptSpec("padding", 0, (3, 8, 8)))
        assert prompt_drift(empty, empty.clone()) == 0.0

    def test_spec_mismatch(self, prompt_spec):
        with pytest.raises(ValueError, match="different specs"):
            prompt_drift(init_prompt(prompt_spec), init_prompt(PromptSpec("padding", 1, (3, 8, 8))))

    def test_series(self):
        reports = [RoundReport(round=1, sampled=[0], mean_drift=0.5), RoundReport(round=2, sampled=[1])]
        assert drift_series(reports) == [(1, 0.5), (2, 0.0)]


class TestPureColorProbe:
    def test_images_are_constant_per_channel(self):
        images = pure_color_images(5, (3, 8, 8), torch.Generator().manual_seed(0))
        assert images.shape == (5, 3, 8, 8)
        assert torch.equal(images, images[:, :, :1, :1].expand_as(images))
        assert images.min() >= -1 and images.max() <= 1

    def test_histogram_sums_to_one(self, mlp_config, prompt_spec):
        hist = pure_color_probe(
            build_model(mlp_config), init_prompt(prompt_spec), 50, (3, 8, 8), torch.Generator().manual_seed(0)
        )
        assert hist.shape == (4,)
        assert hist.sum() == pytest.approx(1.0)
        assert np.all(hist >= 0)

    def test_constant_model_is_one_hot(self, mlp_config):
        hist = pure_color_probe(constant_model(mlp_config, 3), None, 20, (3, 8, 8), torch.Generator().manual_seed(0))
        assert hist.tolist() == [0.0, 0.0, 0.0, 1.0]

    def test_needs_images(self, mlp_config):
        with pytest.raises(ValueError):
            pure_color_probe(build_model(mlp_config), None, 0, (3, 8, 8), torch.Generator().manual_seed(0))


class TestDistributionSimilarity:
    @pytest.mark.parametrize("metric", ["cosine", "tv"])
    def test_identical(self, metric):
        assert distribution_similarity([0.2, 0.8, 0.0], [0.2, 0.8, 0.0], metric) == pytest.approx(1.0)

    @pytest.mark.parametrize("metric", ["cosine", "tv"])
    def test_disjoint(self, metric):
        assert distribution_similarity([1.0, 0.0], [0.0, 3.0], metric) == pytest.approx(0.0)

    def test_cosine_is_scale_free(self):
        assert distribution_similarity([1, 1, 0], [5, 5, 0]) == pytest.approx(1.0)

    def test_zero_histogram(self):
        with pytest.raises(ValueError, match="zero"):
            distribution_similarity([0, 0], [1, 0])

    def test_unknown_metric(self):
        with pytest.raises(ValueError, match="metric"):
            distribution_similarity([1, 0], [1, 0], "kl")


def test_embeddings_have_the_head_width(mlp_config, batch, prompt_spec):
    model = build_model(mlp_config)
    embeddings = export_embeddings(model, init_prompt(prompt_spec), batch[0])
    assert embeddings.shape == (batch[0].shape[0], model.embedding_size)
    predictions = predict(model, batch[0])
    torch.testing.assert_close(model.head(embeddings).argmax(-1), predictions)


def test_prompt_distance_matrix(prompt_spec):
    prompts = {i: init_prompt(prompt_spec, owner=i) for i in range(3)}
    with torch.no_grad():
        prompts[2].delta[prompts[2].support] = 1.0
    hists = {0: np.array([5, 5]), 1: np.array([1, 1]), 2: np.array([0, 4])}
    rows = prompt_distance_matrix(prompts, hists)
    assert [(a, b) for a, b, _, _ in rows] == [(0, 1), (0, 2), (1, 2)]
    assert rows[0][2:] == (0.0, 0.0)
    assert rows[1][2] == pytest.approx(1.0)
    assert rows[1][3] == pytest.approx(0.5)


class TestFinetuneNewClient:
    def test_zero_epochs_is_the_initial_accuracy(self, mlp_config, synthetic, prompt_spec):
        train, test = synthetic
        model = build_model(mlp_config)
        w = flatten_params(model)
        curve = finetune_new_client(
            model, w, train.images, train.labels, test.images, test.labels, prompt_spec, budget_samples=40, epochs=0
        )
        assert curve == [evaluate_client(model, test.images, test.labels, params=w)]

    def test_prompt_only_keeps_backbone(self, mlp_config, synthetic, prompt_spec):
        train, test = synthetic
        model = build_model(mlp_config)
        w = flatten_params(model)
        curve = finetune_new_client(
            model, w, train.images, train.labels, test.images, test.labels, prompt_spec, budget_samples=40, epochs=3
        )
        assert len(curve) == 4
        assert all(0.0 <= acc <= 1.0 for acc in curve)
        assert flatten_params(model).equal(w)

    def test_head_only(self, mlp_config, synthetic):
        train, test = synthetic
        model = build_model(mlp_config)
        w = flatten_params(model)
        curve = finetune_new_client(
            model, w, train.images, train.labels, test.images, test.labels, budget_samples=40, epochs=2, mode="head-only"
        )
        assert len(curve) == 3

    def test_budget_exceeds_shard(self, mlp_config, synthetic, prompt_spec):
        train, test = synthetic
        model = build_model(mlp_config)
        with pytest.raises(ValueError, match="Budget"):
            finetune_new_client(
                model,
                flatten_params(model),
                train.images[:10],
                train.labels[:10],
                test.images,
                test.labels,
                prompt_spec,
                budget_samples=20,
            )

    def test_prompt_only_needs_a_spec(self, mlp_config, synthetic):
        train, test = synthetic
        model = build_model(mlp_config)
        with pytest.raises(ValueError, match="spec"):
            finetune_new_client(
                model, flatten_params(model), train.images, train.labels, test.images, test.labels, budget_samples=10
            )
