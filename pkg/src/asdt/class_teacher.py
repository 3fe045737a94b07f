"""Classification branch: GAP + linear head, CAMs and CAM pseudo labels.

Tensors are channels-first and batched: features (N, C_f, h, w), heat maps
(N, C, h, w), probability / one-hot maps (N, C+1, h, w) with channel 0 the
background.
"""
from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-7


class ClassHead(nn.Module):
    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, num_classes)
        nn.init.normal_(self.fc.weight, std=0.01)
        nn.init.zeros_(self.fc.bias)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return class_forward(feats, self.fc.weight, self.fc.bias)

    def cams(self, feats: torch.Tensor, tags: torch.Tensor | None = None) -> torch.Tensor:
        return compute_cams(feats, self.fc.weight, tags)


def class_forward(feats: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Multi-label scores sigmoid(W . GAP(F) + b), shape (N, C)."""
    if feats.shape[1] != weight.shape[1]:
        raise ValueError(f"feature channels {feats.shape[1]} != head input {weight.shape[1]}")
    pooled = feats.mean(dim=(2, 3))
    return torch.sigmoid(F.linear(pooled, weight, bias))


def classification_loss(scores: torch.Tensor, tags: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy summed over classes, averaged over the batch."""
    y = tags.to(scores.dtype)
    p = scores.clamp(EPS, 1 - EPS)
    per_image = -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).sum(dim=-1)
    return per_image.mean()


def normalize_cams(raw: torch.Tensor) -> torch.Tensor:
    """Rectify, then min-max normalize each (image, class) map to [0, 1].

    Constant maps (including all-zero ones) become all zeros.
    """
    raw = F.relu(raw)
    flat = raw.flatten(2)
    lo = flat.min(dim=2, keepdim=True).values
    hi = flat.max(dim=2, keepdim=True).values
    span = hi - lo
    out = torch.where(span > 0, (flat - lo) / span.clamp_min(torch.finfo(raw.dtype).tiny), torch.zeros_like(flat))
    return out.view_as(raw)


def compute_cams(feats: torch.Tensor, weight: torch.Tensor, tags: torch.Tensor | None = None) -> torch.Tensor:
    """H_c = sum_k w_ck F_k, rectified and normalized; untagged classes zeroed."""
    if feats.shape[1] != weight.shape[1]:
        raise ValueError(f"feature channels {feats.shape[1]} != head input {weight.shape[1]}")
    raw = torch.einsum("ck,nkhw->nchw", weight, feats)
    cams = normalize_cams(raw)
    if tags is not None:
        cams = cams * tags.to(cams.dtype)[:, :, None, None]
    return cams


@torch.no_grad()
def multiscale_cams(
    image: torch.Tensor,
    backbone: nn.Module,
    head: ClassHead,
    scales: Sequence[float] = (0.5, 1.0, 1.5, 2.0),
    tags: torch.Tensor | None = None,
    flip: bool = True,
) -> torch.Tensor:
    """Average of per-scale (and flipped) CAMs at the scale-1 feature resolution."""
    if not scales:
        raise ValueError("scales must be non-empty")
    H, W = image.shape[-2:]
    base = _feature_hw(image, backbone)
    acc = 0.0
    for s in scales:
        size = (max(1, int(round(H * s))), max(1, int(round(W * s))))
        x = image if size == (H, W) else F.interpolate(image, size=size, mode="bilinear", align_corners=False)
        cam = head.cams(backbone(x), tags)
        if flip:
            cam_f = head.cams(backbone(x.flip(-1)), tags).flip(-1)
            cam = 0.5 * (cam + cam_f)
        if cam.shape[-2:] != base:
            cam = F.interpolate(cam, size=base, mode="bilinear", align_corners=False)
        acc = acc + cam
    out = normalize_cams(acc / len(scales))
    if tags is not None:
        out = out * tags.to(out.dtype)[:, :, None, None]
    return out


def _feature_hw(image: torch.Tensor, backbone: nn.Module) -> tuple[int, int]:
    h, w = image.shape[-2:]
    for s in backbone.cfg.strides:
        h, w = -(-h // s), -(-w // s)
    return (h, w)


def cams_to_pseudolabels(
    cams: torch.Tensor, tags: torch.Tensor, theta_fg: float = 0.30, theta_bg: float = 0.05
) -> tuple[torch.Tensor, torch.Tensor]:
    """Two-threshold hard labels B (N, C+1, h, w) and reliability R (N, h, w).

    Only tagged classes compete. Pixels with theta_bg < max H < theta_fg are
    unreliable: r = 0 and an all-zero one-hot column.
    """
    masked = cams * tags.to(cams.dtype)[:, :, None, None]
    top, arg = masked.max(dim=1)
    fg = top >= theta_fg
    bg = (top <= theta_bg) & ~fg
    label = torch.where(fg, arg + 1, torch.zeros_like(arg))
    onehot = F.one_hot(label, cams.shape[1] + 1).permute(0, 3, 1, 2).to(cams.dtype)
    reliable = (fg | bg).to(cams.dtype)
    return onehot * reliable[:, None], reliable


def cam_to_probmaps(cams: torch.Tensor, tags: torch.Tensor) -> torch.Tensor:
    """Simplex maps from CAMs with background score 1 - max_c H_c."""
    masked = cams * tags.to(cams.dtype)[:, :, None, None]
    bg = 1 - masked.max(dim=1, keepdim=True).values
    scores = torch.cat([bg, masked], dim=1)
    return scores / scores.sum(dim=1, keepdim=True)
