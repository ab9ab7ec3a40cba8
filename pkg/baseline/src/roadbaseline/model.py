"""Multi-head CNN: one shared encoder, one classifier head per attribute.

Both backbones are desk-scale renditions of their namesakes: the VGG-like
encoder stacks plain 3x3 convolution pairs between poolings, the
ResNet-like encoder stacks residual basic blocks. Channel widths are kept
small; the architecture pattern, not the parameter count, is what the
baselines exercise.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import torch
from torch import nn

from .errors import SpecInvalid
from .formats import CodebookInfo

EMBEDDING_DIM = 128


class Backbone(Enum):
    Vgg16Like = "VGG16-like"
    ResNet50Like = "ResNet50-like"


@dataclass(frozen=True)
class MultiHeadModelSpec:
    backbone: Backbone
    # Attribute id to class count; single-class attributes are untrainable.
    heads: Mapping[str, int]
    input_size: int = 64
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 16

    def __post_init__(self) -> None:
        if not self.heads:
            raise SpecInvalid("model spec declares no heads")
        for attr_id, count in self.heads.items():
            if count < 2:
                raise SpecInvalid(
                    f"head {attr_id!r} has {count} class(es); single-class "
                    f"attributes are excluded from training"
                )
        if self.input_size < 32 or self.input_size % 8:
            raise SpecInvalid(
                f"input_size {self.input_size} must be a multiple of 8, at least 32"
            )
        if self.learning_rate <= 0:
            raise SpecInvalid(f"learning_rate {self.learning_rate} must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise SpecInvalid("epochs and batch_size must be at least 1")

    def validate_against(self, codebook: CodebookInfo) -> None:
        for attr_id, count in self.heads.items():
            if attr_id not in codebook.classes:
                raise SpecInvalid(f"head {attr_id!r} is not in the codebook")
            actual = len(codebook.classes[attr_id])
            if count != actual:
                raise SpecInvalid(
                    f"head {attr_id!r} declares {count} classes; codebook has {actual}"
                )


def heads_for(codebook: CodebookInfo, excluded: tuple[str, ...] = ()) -> dict[str, int]:
    """Trainable heads: every codebook attribute that is neither single-class
    nor excluded by the split."""
    return {
        attr_id: len(codes)
        for attr_id, codes in codebook.classes.items()
        if len(codes) >= 2 and attr_id not in excluded
    }


class _ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_channels != out_channels:
            self.shortcut: nn.Module = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


def _vgg_encoder() -> nn.Module:
    layers: list[nn.Module] = []
    in_channels = 3
    for out_channels in (16, 32, 64):
        layers += [
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        ]
        in_channels = out_channels
    return nn.Sequential(*layers)


def _resnet_encoder() -> nn.Module:
    return nn.Sequential(
        nn.Conv2d(3, 16, 3, padding=1, bias=False),
        nn.BatchNorm2d(16),
        nn.ReLU(inplace=True),
        _ResidualBlock(16, 16, stride=1),
        _ResidualBlock(16, 32, stride=2),
        _ResidualBlock(32, 64, stride=2),
    )


class MultiHeadNet(nn.Module):
    """Shared encoder feeding an independent linear classifier per attribute."""

    def __init__(self, spec: MultiHeadModelSpec) -> None:
        super().__init__()
        if spec.backbone is Backbone.Vgg16Like:
            self.encoder = _vgg_encoder()
        else:
            self.encoder = _resnet_encoder()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.embed = nn.Linear(64, EMBEDDING_DIM)
        self.relu = nn.ReLU(inplace=True)
        self.heads = nn.ModuleDict(
            {attr_id: nn.Linear(EMBEDDING_DIM, count) for attr_id, count in spec.heads.items()}
        )

    def forward(self, batch: torch.Tensor) -> dict[str, torch.Tensor]:
        features = self.pool(self.encoder(batch)).flatten(1)
        shared = self.relu(self.embed(features))
        return {attr_id: head(shared) for attr_id, head in self.heads.items()}


def build_model(spec: MultiHeadModelSpec) -> MultiHeadNet:
    return MultiHeadNet(spec)
