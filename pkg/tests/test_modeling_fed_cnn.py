import pytest
import torch
from transformers import AutoModelForImageClassification

from pfedpt import (
    FedCNNConfig,
    FedCNNForImageClassification,
    build_model,
    flatten_params,
    load_params,
    split_body_head,
)
from training.federated import aggregate


CNN_PAPER_CIFAR10_PARAMETERS = 815_892


def test_cnn_paper_parameter_count():
    model = build_model(FedCNNConfig())
    # conv 3->64: 4864, conv 64->64: 102464, fc 1600->394: 630794, fc 394->192: 75840, head 192->10: 1930
    assert model.num_parameters() == CNN_PAPER_CIFAR10_PARAMETERS
    assert flatten_params(model).num_parameters == CNN_PAPER_CIFAR10_PARAMETERS


def test_cnn_paper_layers():
    config = FedCNNConfig()
    model = build_model(config)
    assert config.feature_map_size() == (5, 5)
    assert model.head.in_features == 192
    assert [m.out_features for m in model.body if isinstance(m, torch.nn.Linear)] == [394, 192]


def test_same_seed_same_initialization(mlp_config):
    first = flatten_params(build_model(mlp_config, init_seed=7))
    second = flatten_params(build_model(mlp_config, init_seed=7))
    other = flatten_params(build_model(mlp_config, init_seed=8))
    assert first.equal(second)
    assert not first.equal(other)


def test_biases_start_at_zero(mlp_config):
    model = build_model(mlp_config)
    for name, param in model.named_parameters():
        if name.endswith("bias"):
            assert torch.equal(param, torch.zeros_like(param))


def test_zero_input_gives_output_biases():
    config = FedCNNConfig(architecture="mlp-tiny", num_channels=1, image_size=[8, 8], num_classes=4)
    model = build_model(config)
    logits = model(pixel_values=torch.zeros(3, 1, 8, 8)).logits
    assert torch.equal(logits, model.head.bias.detach().expand(3, 4))
    assert torch.equal(logits, torch.zeros(3, 4))


def test_input_too_small():
    with pytest.raises(ValueError, match="too small"):
        build_model(FedCNNConfig(image_size=[10, 10]))


@pytest.mark.parametrize("kwargs", [{"num_classes": 1}, {"image_size": [0, 32]}, {"architecture": "vit"}])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        FedCNNConfig(**kwargs)


class TestFlattenLoad:
    def test_round_trip(self, mlp_config):
        model = build_model(mlp_config, init_seed=1)
        pv = flatten_params(build_model(mlp_config, init_seed=2))
        assert flatten_params(load_params(model, pv)).equal(pv)

    def test_flat_round_trip(self, mlp_config):
        pv = flatten_params(build_model(mlp_config))
        assert pv.from_flat(pv.to_flat()).equal(pv)

    def test_canonical_order(self, mlp_config):
        pv = flatten_params(build_model(mlp_config))
        assert pv.names == ("body.1.weight", "body.1.bias", "head.weight", "head.bias")

    def test_zero_vector_gives_zero_logits(self, mlp_config, batch):
        model = build_model(mlp_config)
        pv = flatten_params(model)
        load_params(model, pv.from_flat(torch.zeros(pv.num_parameters)))
        assert torch.equal(model(pixel_values=batch[0]).logits, torch.zeros(len(batch[1]), 4))

    def test_same_vector_same_logits(self, mlp_config, batch):
        pv = flatten_params(build_model(mlp_config, init_seed=5))
        first = load_params(build_model(mlp_config, init_seed=1), pv)
        second = load_params(build_model(mlp_config, init_seed=2), pv)
        assert torch.equal(first(pixel_values=batch[0]).logits, second(pixel_values=batch[0]).logits)

    def test_count_mismatch(self, mlp_config):
        model = build_model(mlp_config)
        pv = flatten_params(model)
        with pytest.raises(ValueError):
            load_params(model, pv.select(["head.weight", "head.bias"]))

    def test_shape_mismatch(self, mlp_config):
        model = build_model(mlp_config)
        other = FedCNNConfig(
            architecture="mlp-tiny", num_channels=3, image_size=[8, 8], num_classes=4, hidden_sizes=[6]
        )
        with pytest.raises(ValueError):
            load_params(model, flatten_params(build_model(other)))

    def test_partial_load(self, mlp_config):
        model = build_model(mlp_config, init_seed=1)
        donor = flatten_params(build_model(mlp_config, init_seed=2))
        before = flatten_params(model)
        load_params(model, donor.select(["head.weight", "head.bias"]), strict=False)
        after = flatten_params(model)
        assert torch.equal(after["head.weight"], donor["head.weight"])
        assert torch.equal(after["body.1.weight"], before["body.1.weight"])


class TestCheckpoint:
    def test_round_trip(self, mlp_config, tmp_path):
        pv = flatten_params(build_model(mlp_config, init_seed=4))
        path = tmp_path / "backbone.pfpv"
        pv.save(path, mlp_config.spec_tag)
        assert pv.load(path, spec_tag=mlp_config.spec_tag).equal(pv)

    def test_header_layout(self, mlp_config, tmp_path):
        pv = flatten_params(build_model(mlp_config))
        path = tmp_path / "backbone.pfpv"
        pv.save(path, "tag")
        raw = path.read_bytes()
        assert raw[:4] == b"PFPV"
        assert int.from_bytes(raw[4:8], "little") == 3
        assert raw[8:11] == b"tag"
        assert int.from_bytes(raw[11:19], "little") == pv.num_parameters
        assert len(raw) == 19 + 4 * pv.num_parameters

    def test_wrong_tag(self, mlp_config, tmp_path):
        pv = flatten_params(build_model(mlp_config))
        path = tmp_path / "backbone.pfpv"
        pv.save(path, "mlp-tiny:3x8x8:4")
        with pytest.raises(ValueError, match="expected"):
            pv.load(path, spec_tag="cnn-paper:3x32x32:10")

    def test_bad_magic(self, mlp_config, tmp_path):
        path = tmp_path / "garbage.pfpv"
        path.write_bytes(b"NOPE" + bytes(32))
        with pytest.raises(ValueError, match="magic"):
            flatten_params(build_model(mlp_config)).load(path)


class TestBodyHeadSplit:
    def test_cnn_paper_head_count(self):
        model = build_model(FedCNNConfig())
        split = split_body_head(model)
        assert split.num_parameters(flatten_params(model), "head") == 192 * 10 + 10

    def test_disjoint_cover(self, mlp_config):
        model = build_model(mlp_config)
        split = split_body_head(model)
        names = {name for name, _ in model.named_parameters()}
        assert not set(split.body) & set(split.head)
        assert set(split.body) | set(split.head) == names
        assert split.head == ("head.weight", "head.bias")

    def test_aggregating_bodies_keeps_heads(self, mlp_config):
        model = build_model(mlp_config)
        split = split_body_head(model)
        client = flatten_params(build_model(mlp_config, init_seed=1))
        bodies = [flatten_params(build_model(mlp_config, init_seed=s)).select(split.body) for s in (2, 3)]
        merged = client.merge(aggregate(bodies, [1.0, 1.0]))
        for name in split.head:
            assert torch.equal(merged[name], client[name])
        for name in (n for n in split.body if n.endswith("weight")):
            assert not torch.equal(merged[name], client[name])


def test_embeddings_are_head_inputs(mlp_config, batch):
    model = build_model(mlp_config)
    outputs = model(pixel_values=batch[0], output_hidden_states=True)
    (embeddings,) = outputs.hidden_states
    assert embeddings.shape == (len(batch[1]), model.embedding_size)
    torch.testing.assert_close(model.head(embeddings), outputs.logits)


def test_auto_model_registration(mlp_config):
    model = AutoModelForImageClassification.from_config(mlp_config)
    assert isinstance(model, FedCNNForImageClassification)
