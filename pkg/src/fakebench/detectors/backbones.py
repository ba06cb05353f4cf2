"""Feature extractors behind the CNN detectors.

Every backbone maps an (N, C, H, W) tensor to (N, feature_dim) pooled features; the
detector appends its own dropout + 2-class head. Generic pretrained weights are loaded
from a local file when one is given (``weights=``); otherwise parameters keep their
seeded random initialisation.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Callable

import torch
from torch import nn

logger = logging.getLogger(__name__)


class SeparableConv2d(nn.Module):
    """Depthwise 3x3 followed by pointwise 1x1, no bias (BN follows)."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.depthwise = nn.Conv2d(cin, cin, 3, stride=stride, padding=1, groups=cin, bias=False)
        self.pointwise = nn.Conv2d(cin, cout, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pointwise(self.depthwise(x))


def _sep_bn_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(SeparableConv2d(cin, cout, stride), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class TinySeparable(nn.Module):
    """Five-stage depthwise-separable network, about 30k parameters.

    The 3x3 stem sees every pixel pair before the first stride, so pixel-level
    patterns survive subsampling.
    """

    feature_dim = 128

    def __init__(self, in_channels: int = 3):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, 16, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(16),
            nn.ReLU(inplace=True),
            _sep_bn_relu(16, 32, 2),
            _sep_bn_relu(32, 64, 2),
            _sep_bn_relu(64, 128, 2),
            _sep_bn_relu(128, 128, 1),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.features(x)).flatten(1)


class _XceptionBlock(nn.Module):
    def __init__(self, cin: int, cout: int, reps: int, stride: int, start_with_relu: bool = True, grow_first: bool = True):
        super().__init__()
        self.skip = None
        if cout != cin or stride != 1:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))
        layers: list[nn.Module] = []
        ch = cin
        if grow_first:
            layers += [nn.ReLU(inplace=False), SeparableConv2d(cin, cout), nn.BatchNorm2d(cout)]
            ch = cout
        for _ in range(reps - 1):
            layers += [nn.ReLU(inplace=False), SeparableConv2d(ch, ch), nn.BatchNorm2d(ch)]
        if not grow_first:
            layers += [nn.ReLU(inplace=False), SeparableConv2d(cin, cout), nn.BatchNorm2d(cout)]
        if not start_with_relu:
            layers = layers[1:]
        if stride != 1:
            layers.append(nn.MaxPool2d(3, stride, padding=1))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skip = x if self.skip is None else self.skip(x)
        return self.body(x) + skip


class Xception(nn.Module):
    """Xception (entry flow, 8 middle blocks, exit flow), 2048-d pooled output."""

    feature_dim = 2048

    def __init__(self, in_channels: int = 3):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, 32, 3, stride=2, bias=False),
            nn.BatchNorm2d(32),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
        )
        self.entry = nn.Sequential(
            _XceptionBlock(64, 128, 2, 2, start_with_relu=False),
            _XceptionBlock(128, 256, 2, 2),
            _XceptionBlock(256, 728, 2, 2),
        )
        self.middle = nn.Sequential(*[_XceptionBlock(728, 728, 3, 1) for _ in range(8)])
        self.exit = nn.Sequential(
            _XceptionBlock(728, 1024, 2, 2, grow_first=False),
            SeparableConv2d(1024, 1536),
            nn.BatchNorm2d(1536),
            nn.ReLU(inplace=True),
            SeparableConv2d(1536, 2048),
            nn.BatchNorm2d(2048),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.exit(self.middle(self.entry(self.stem(x))))).flatten(1)


class CooccurrenceCNN(nn.Module):
    """Three conv blocks over the 3x256x256 co-occurrence tensor, then global pooling."""

    feature_dim = 64

    def __init__(self, in_channels: int = 3):
        super().__init__()

        def block(cin: int, cout: int, stride: int) -> nn.Sequential:
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            )

        self.features = nn.Sequential(block(in_channels, 16, 2), block(16, 32, 1), block(32, 64, 1))
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.features(x)).flatten(1)


BACKBONES: dict[str, Callable[[], nn.Module]] = {
    "tiny_separable": TinySeparable,
    "xception": Xception,
    "cooccurrence_cnn": CooccurrenceCNN,
}


def build_backbone(name: str, weights: str | Path | None = None) -> nn.Module:
    """Instantiate a registered backbone, optionally loading a local state dict."""
    if name not in BACKBONES:
        raise KeyError(f"unknown backbone {name!r}; registered: {sorted(BACKBONES)}")
    net = BACKBONES[name]()
    if weights is not None:
        path = Path(weights)
        if not path.exists():
            raise FileNotFoundError(f"backbone weights not found: {path}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        missing, unexpected = net.load_state_dict(state, strict=False)
        logger.info("loaded %s weights from %s (%d missing, %d unexpected keys)", name, path, len(missing), len(unexpected))
    return net
