"""Small dilated CNN shared by the three branches."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, ...] = (32, 32, 64, 64, 128, 128)
    strides: tuple[int, ...] = (1, 2, 1, 2, 1, 1)
    dilations: tuple[int, ...] = (1, 1, 1, 1, 2, 2)
    in_channels: int = 3

    def __post_init__(self):
        if not (len(self.channels) == len(self.strides) == len(self.dilations)):
            raise ValueError("channels, strides and dilations must have equal length")

    @property
    def stride(self) -> int:
        return math.prod(self.strides)

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


class ToyBackbone(nn.Module):
    """conv3x3 -> BN -> ReLU stack; ``padding = dilation`` so each stride-s
    layer maps n to ceil(n / s)."""

    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        layers = []
        cin = cfg.in_channels
        for cout, s, d in zip(cfg.channels, cfg.strides, cfg.dilations):
            layers += [
                nn.Conv2d(cin, cout, 3, stride=s, padding=d, dilation=d, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=False),
            ]
            cin = cout
        self.body = nn.Sequential(*layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    @property
    def stride(self) -> int:
        return self.cfg.stride

    @property
    def out_channels(self) -> int:
        return self.cfg.out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return backbone_forward(x, self)


def backbone_forward(image: torch.Tensor, net: ToyBackbone) -> torch.Tensor:
    """(N, 3, H, W) -> (N, C_f, ceil(H/stride), ceil(W/stride))."""
    if not torch.isfinite(image).all():
        raise ValueError("backbone input contains non-finite values")
    return net.body(image)


def feature_size(n: int, cfg: BackboneConfig) -> int:
    for s in cfg.strides:
        n = -(-n // s)
    return n
