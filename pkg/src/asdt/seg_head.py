"""Segmentation branch shared by the seg-teacher and the student."""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F


def seg_logits(feats, w1, b1, w2, b2, dilation: int) -> torch.Tensor:
    if feats.shape[1] != w1.shape[1]:
        raise ValueError(f"feature channels {feats.shape[1]} != seg head input {w1.shape[1]}")
    h = F.relu(F.conv2d(feats, w1, b1, padding=dilation, dilation=dilation))
    return F.conv2d(h, w2, b2, padding=dilation, dilation=dilation)


def seg_forward(feats, w1, b1, w2, b2, dilation: int = 12) -> torch.Tensor:
    """conv3x3(d) -> ReLU -> conv3x3(d) -> softmax over the C+1 channels."""
    return torch.softmax(seg_logits(feats, w1, b1, w2, b2, dilation), dim=1)


class SegHead(nn.Module):
    def __init__(self, in_channels: int, num_classes: int, hidden: int = 64, dilation: int = 12):
        super().__init__()
        self.dilation = dilation
        self.conv1 = nn.Conv2d(in_channels, hidden, 3)
        self.conv2 = nn.Conv2d(hidden, num_classes + 1, 3)
        nn.init.kaiming_normal_(self.conv1.weight, nonlinearity="relu")
        nn.init.normal_(self.conv2.weight, std=0.01)
        nn.init.zeros_(self.conv1.bias)
        nn.init.zeros_(self.conv2.bias)

    def params(self):
        return self.conv1.weight, self.conv1.bias, self.conv2.weight, self.conv2.bias

    def logits(self, feats: torch.Tensor) -> torch.Tensor:
        return seg_logits(feats, *self.params(), self.dilation)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return seg_forward(feats, *self.params(), self.dilation)


def head_dilation(feature_size: int, paper_dilation: int = 12, toy_dilation: int = 4) -> int:
    """Dilation 12 overshoots maps of 16x16 or smaller; fall back to the toy value."""
    return toy_dilation if feature_size <= 16 else paper_dilation
