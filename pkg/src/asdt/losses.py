"""Masked hard-label distillation losses and the pairwise structural energy."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

EPS = 1e-7


class UnreliableTargetWarning(RuntimeWarning):
    """Raised (as a warning) when every pixel of a target is masked out."""


@dataclass(frozen=True)
class PairwiseKernelConfig:
    sigma_D: float = 15.0
    sigma_I: float = 100.0
    radius: int = 5

    def __post_init__(self):
        if self.sigma_D <= 0 or self.sigma_I <= 0 or self.radius <= 0:
            raise ValueError("sigma_D, sigma_I and radius must be positive")


def present_mask(tags: torch.Tensor) -> torch.Tensor:
    """(N, C) tag bits -> (N, C+1) channel mask with background always on."""
    ones = torch.ones_like(tags[:, :1])
    return torch.cat([ones, tags], dim=1).bool()


def masked_hard_ce(
    P: torch.Tensor,
    B: torch.Tensor,
    R: torch.Tensor | None = None,
    tags: torch.Tensor | None = None,
) -> torch.Tensor:
    """-sum_i sum_{c in C+ and bg} r_i b_ci log p_ci / sum_i r_i.

    P, B: (N, K, h, w); R: (N, h, w) or None for all-ones; tags: (N, K-1).
    """
    if R is None:
        R = torch.ones_like(P[:, 0])
    weight = B * R[:, None]
    if tags is not None:
        weight = weight * present_mask(tags).to(P.dtype)[:, :, None, None]
    n_reliable = R.sum()
    if n_reliable <= 0:
        warnings.warn("all pixels unreliable; distillation loss is zero", UnreliableTargetWarning, stacklevel=2)
        return (P * 0).sum()
    return -(weight * torch.log(P.clamp_min(EPS))).sum() / n_reliable


def _offsets(radius: int):
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if (dy, dx) != (0, 0) and dy * dy + dx * dx <= radius * radius:
                yield dy, dx


def _pair_slices(n: int, d: int):
    # (source slice, neighbour slice) along one axis for offset d
    if d >= 0:
        return slice(0, n - d), slice(d, n)
    return slice(-d, n), slice(0, n + d)


def pairwise_affinity(image: torch.Tensor, cfg: PairwiseKernelConfig, spacing: float = 1.0):
    """Yield ((dy, dx), src, dst, W) with W the bilateral weight between the
    pixels at ``src`` and the neighbours at ``dst`` (index tuples into h, w)."""
    h, w = image.shape[-2:]
    for dy, dx in _offsets(cfg.radius):
        sy, ty = _pair_slices(h, dy)
        sx, tx = _pair_slices(w, dx)
        if sy.stop <= sy.start or sx.stop <= sx.start:
            continue
        diff = image[..., sy, sx] - image[..., ty, tx]
        spatial = (dy * dy + dx * dx) * spacing * spacing / (2 * cfg.sigma_D**2)
        W = torch.exp(-spatial - (diff * diff).sum(dim=-3) / (2 * cfg.sigma_I**2))
        yield (dy, dx), (sy, sx), (ty, tx), W


def structural_energy(
    P: torch.Tensor, image: torch.Tensor, cfg: PairwiseKernelConfig = PairwiseKernelConfig(), spacing: float = 1.0
) -> torch.Tensor:
    """sum_i sum_{j in N(i)} W_ij sum_c p_ci (1 - p_cj), per pixel.

    P: (N, K, h, w) simplex maps; image: (N, 3, h, w) colours aligned with P.
    N(i) is the disk of ``cfg.radius`` grid cells; ordered pairs, so each
    unordered pair contributes twice.
    """
    if P.shape[-2:] != image.shape[-2:]:
        raise ValueError(f"P {tuple(P.shape[-2:])} and image {tuple(image.shape[-2:])} are not aligned")
    total = P.new_zeros(())
    for _, (sy, sx), (ty, tx), W in pairwise_affinity(image.to(P.dtype), cfg, spacing):
        disagree = (P[..., sy, sx] * (1 - P[..., ty, tx])).sum(dim=1)
        total = total + (W * disagree).sum()
    return total / (P.shape[0] * P.shape[-2] * P.shape[-1])


def _distill(P, B, R, tags, image, cfg, lambda_str, spacing):
    loss = masked_hard_ce(P, B, R, tags)
    if lambda_str:
        loss = loss + lambda_str * structural_energy(P, image, cfg, spacing)
    return loss


def loss_ct_to_st(P_st, B_ct, R_ct, tags, image, cfg=PairwiseKernelConfig(), lambda_str=0.1, spacing=1.0):
    return _distill(P_st, B_ct, R_ct, tags, image, cfg, lambda_str, spacing)


def loss_ct_to_s(P_s, B_ct, R_ct, tags, image, cfg=PairwiseKernelConfig(), lambda_str=0.1, spacing=1.0):
    return _distill(P_s, B_ct, R_ct, tags, image, cfg, lambda_str, spacing)


def loss_st_to_s(P_s, B_st, tags, image, cfg=PairwiseKernelConfig(), lambda_str=0.1, spacing=1.0, valid=None):
    """Seg-teacher -> student: no reliability mask. ``valid`` only drops
    padding pixels that have no target at all."""
    return _distill(P_s, B_st, valid, tags, image, cfg, lambda_str, spacing)
