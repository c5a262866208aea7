"""Fully convolutional feature extractors.

Three backbone families are supported, identified by one-letter names:
``A`` (AlexNet-style), ``R`` (ResNet18-style), ``V`` (VGG16-style). Only the
fully convolutional part of each network is kept, so any input resolution
above the architecture's minimum maps to a (d, h, w) activation tensor.

Weights come from a standard torchvision-format state-dict file when one is
available (looked up via an explicit path or the QUERYVEIL_WEIGHTS directory);
otherwise the backbone is randomly initialized from a fixed seed, which keeps
every run reproducible. Parameters are frozen; gradients flow to the input.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import torch
import torch.nn as nn
import torchvision.models as tvm

from .errors import InvalidInputError
from .image import Image, to_tensor

WEIGHTS_ENV_VAR = "QUERYVEIL_WEIGHTS"

# standard preprocessing bound to these architectures' published weights
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_WEIGHT_FILES = {"A": "alexnet.pth", "R": "resnet18.pth", "V": "vgg16.pth"}
_CHANNELS = {"A": 256, "R": 512, "V": 512}
_MIN_INPUT = {"A": 67, "R": 32, "V": 32}


@dataclass
class ActivationTensor:
    """Nonnegative (d, h, w) feature map produced by a backend."""

    values: torch.Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise InvalidInputError(
                f"activation tensor must be (d, h, w), got {tuple(self.values.shape)}"
            )
        # post-ReLU maps are nonnegative by construction; clamp guards exports
        self.values = self.values.clamp(min=0.0)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def _convolutional_part(name: str) -> nn.Module:
    if name == "A":
        return tvm.alexnet(weights=None).features
    if name == "V":
        return tvm.vgg16(weights=None).features
    if name == "R":
        net = tvm.resnet18(weights=None)
        return nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool,
            net.layer1, net.layer2, net.layer3, net.layer4,
        )
    raise ValueError(f"unknown backend name {name!r} (expected A, R or V)")


class FeatureBackend(nn.Module):
    """A named, frozen, fully convolutional feature extractor."""

    def __init__(self, name: str, weights_path: str | None = None, seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if name not in _CHANNELS:
            raise ValueError(f"unknown backend name {name!r} (expected A, R or V)")
        self.name = name
        self.channels = _CHANNELS[name]
        self.min_input = _MIN_INPUT[name]
        if weights_path is None:
            torch.manual_seed(seed)
            self.net = _convolutional_part(name)
            self.weights_id = f"seed:{seed}"
        else:
            self.net = _convolutional_part(name)
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            self._load_state(state)
            self.weights_id = f"file:{os.path.basename(str(weights_path))}"
        self.register_buffer(
            "input_mean", torch.tensor(IMAGENET_MEAN).view(3, 1, 1))
        self.register_buffer(
            "input_std", torch.tensor(IMAGENET_STD).view(3, 1, 1))
        self.to(dtype)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def _load_state(self, state: dict) -> None:
        # accept either the conv part's state dict or a full-model checkpoint
        try:
            self.net.load_state_dict(state)
            return
        except RuntimeError:
            pass
        prefixed = {}
        for key, value in state.items():
            if key.startswith("features."):
                prefixed[key[len("features."):]] = value
        if prefixed and self.name in ("A", "V"):
            self.net.load_state_dict(prefixed)
            return
        if self.name == "R":
            full = tvm.resnet18(weights=None)
            full.load_state_dict(state)
            self.net = nn.Sequential(
                full.conv1, full.bn1, full.relu, full.maxpool,
                full.layer1, full.layer2, full.layer3, full.layer4,
            )
            return
        raise InvalidInputError("weight file does not match backend architecture")

    @property
    def dtype(self) -> torch.dtype:
        return self.input_mean.dtype

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(3, H, W) image tensor in [0,1] -> (d, h, w) activation tensor."""
        if x.ndim != 3 or x.shape[0] != 3:
            raise InvalidInputError(f"expected (3, H, W) input, got {tuple(x.shape)}")
        if min(x.shape[-2], x.shape[-1]) < self.min_input:
            raise InvalidInputError(
                f"backend {self.name} needs min side >= {self.min_input}, "
                f"got {tuple(x.shape[-2:])}"
            )
        x = (x.to(self.dtype) - self.input_mean) / self.input_std
        y = self.net(x.unsqueeze(0)).squeeze(0)
        if y.shape[-2] < 1 or y.shape[-1] < 1:
            raise InvalidInputError("input too small: empty activation tensor")
        return y.clamp(min=0.0)


def resolve_weights_path(name: str) -> str | None:
    """Look up a weight file for the given backend in the weights directory."""
    root = os.environ.get(WEIGHTS_ENV_VAR)
    if not root:
        return None
    candidate = os.path.join(root, _WEIGHT_FILES[name])
    return candidate if os.path.isfile(candidate) else None


def load_backend(name: str, weights_path: str | None = None, seed: int = 0,
                 dtype: torch.dtype = torch.float32) -> FeatureBackend:
    """Build a backend, preferring explicit weights, then the weights dir."""
    path = weights_path if weights_path is not None else resolve_weights_path(name)
    return FeatureBackend(name, weights_path=path, seed=seed, dtype=dtype)


def extract(backend: FeatureBackend, image: Image) -> ActivationTensor:
    """Run the FCN on an image (no resampling here; see RetrievalModel)."""
    return ActivationTensor(backend(to_tensor(image, dtype=backend.dtype)))
