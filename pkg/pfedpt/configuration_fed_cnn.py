# coding=utf-8
# Copyright 2024 The pFedPT Authors. All rights reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
""" Federated backbone configuration"""

from transformers import logging
from transformers.configuration_utils import PretrainedConfig


logger = logging.get_logger(__name__)

SUPPORTED_ARCHITECTURES = ("cnn-paper", "mlp-tiny")


class FedCNNConfig(PretrainedConfig):
    r"""
    This is the configuration class to store the configuration of a [`FedCNNForImageClassification`]. It is used to
    instantiate the backbone shared by all federated clients. Instantiating a configuration with the defaults will
    yield the two-convolution CNN used for CIFAR-10 (64 filters of 5x5, then fully connected layers of 394 and 192
    neurons and a classification layer).

    Args:
        architecture (`str`, *optional*, defaults to `"cnn-paper"`):
            One of `"cnn-paper"` or `"mlp-tiny"`.
        num_channels (`int`, *optional*, defaults to 3):
            Number of input image channels.
        image_size (`List[int]`, *optional*, defaults to `[32, 32]`):
            Height and width of the input images.
        num_classes (`int`, *optional*, defaults to 10):
            Number of output classes, at least 2.
        conv_channels (`int`, *optional*, defaults to 64):
            Number of filters of both convolutions (`cnn-paper` only).
        kernel_size (`int`, *optional*, defaults to 5):
            Square kernel size of both convolutions (`cnn-paper` only). Convolutions are valid (unpadded) and are
            each followed by a ReLU and a 2x2 max pooling of stride 2.
        hidden_sizes (`List[int]`, *optional*):
            Widths of the fully connected hidden layers. Defaults to `[394, 192]` for `cnn-paper` and `[32]` for
            `mlp-tiny`. An empty list turns `mlp-tiny` into a linear softmax classifier.
        init_seed (`int`, *optional*, defaults to 0):
            Seed of the fan-in scaled uniform weight initialization. Biases are initialized to zero.
    """

    model_type = "fed_cnn"

    def __init__(
        self,
        architecture="cnn-paper",
        num_channels=3,
        image_size=None,
        num_classes=10,
        conv_channels=64,
        kernel_size=5,
        hidden_sizes=None,
        init_seed=0,
        **kwargs,
    ):
        if architecture not in SUPPORTED_ARCHITECTURES:
            raise ValueError(
                f"Unknown architecture '{architecture}', should be one of {', '.join(SUPPORTED_ARCHITECTURES)}."
            )
        image_size = list(image_size) if image_size is not None else [32, 32]
        if len(image_size) != 2:
            raise ValueError(f"`image_size` should hold a height and a width, got {image_size}.")
        if num_channels <= 0 or min(image_size) <= 0:
            raise ValueError(f"Input shape must be positive, got ({num_channels}, {image_size[0]}, {image_size[1]}).")
        if num_classes < 2:
            raise ValueError(f"`num_classes` must be at least 2, got {num_classes}.")
        if hidden_sizes is None:
            hidden_sizes = [394, 192] if architecture == "cnn-paper" else [32]

        self.architecture = architecture
        self.num_channels = num_channels
        self.image_size = image_size
        self.num_classes = num_classes
        self.conv_channels = conv_channels
        self.kernel_size = kernel_size
        self.hidden_sizes = list(hidden_sizes)
        self.init_seed = init_seed

        super().__init__(**kwargs)

    @property
    def input_shape(self):
        return (self.num_channels, self.image_size[0], self.image_size[1])

    @property
    def spec_tag(self):
        """Short identifier written into parameter checkpoints."""
        shape = "x".join(str(s) for s in self.input_shape)
        return f"{self.architecture}:{shape}:{self.num_classes}"

    def feature_map_size(self):
        """Spatial extent after the two conv + pool stages of `cnn-paper`."""
        height, width = self.image_size
        for _ in range(2):
            height, width = (height - self.kernel_size + 1) // 2, (width - self.kernel_size + 1) // 2
        return height, width
