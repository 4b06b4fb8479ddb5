import pytest
import torch

from pfedpt import FedCNNConfig, PromptSpec
from training.arguments import TrainConfig
from training.data import PartitionConfig, make_synthetic, partition
from training.federated import FederatedData


IMAGE_SHAPE = (3, 8, 8)


@pytest.fixture
def mlp_config():
    return FedCNNConfig(
        architecture="mlp-tiny",
        num_channels=IMAGE_SHAPE[0],
        image_size=list(IMAGE_SHAPE[1:]),
        num_classes=4,
        hidden_sizes=[8],
    )


@pytest.fixture
def small_cnn_config():
    # cnn-paper topology at reduced width, small enough for exhaustive finite differences
    return FedCNNConfig(
        architecture="cnn-paper",
        num_channels=3,
        image_size=[20, 20],
        num_classes=10,
        conv_channels=4,
        hidden_sizes=[16, 8],
    )


@pytest.fixture
def prompt_spec():
    return PromptSpec(template="padding", size=2, image_shape=IMAGE_SHAPE)


@pytest.fixture
def synthetic():
    return make_synthetic(4, IMAGE_SHAPE, n_per_class=30, noise_sigma=0.5, seed=0)


@pytest.fixture
def federated_data(synthetic):
    train, test = synthetic
    shards = partition(
        train, test, PartitionConfig(scheme="iid", num_clients=4, classes_per_client=2, seed=0, min_samples=5)
    )
    return FederatedData(train=train, test=test, shards=shards)


@pytest.fixture
def skewed_data(synthetic):
    train, test = synthetic
    shards = partition(
        train, test, PartitionConfig(scheme="pathological", num_clients=4, classes_per_client=2, seed=0, min_samples=5)
    )
    return FederatedData(train=train, test=test, shards=shards)


@pytest.fixture
def train_config():
    return TrainConfig(
        rounds=3,
        num_clients=4,
        sample_fraction=0.5,
        batch_size=8,
        backbone_epochs=1,
        prompt_epochs=1,
        backbone_lr=0.05,
        prompt_lr=1.0,
        seed=0,
    )


@pytest.fixture
def batch():
    generator = torch.Generator().manual_seed(0)
    x = torch.randn((6,) + IMAGE_SHAPE, generator=generator)
    y = torch.tensor([0, 1, 2, 3, 0, 1])
    return x, y
