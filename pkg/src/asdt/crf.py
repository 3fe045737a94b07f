"""Fully connected CRF, mean-field inference with exact dense pairwise sums."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

UNARY_EPS = 1e-12
DENSE_LIMIT = 96 * 96


@dataclass(frozen=True)
class CrfParams:
    n_iters: int = 10
    w_appearance: float = 4.0
    theta_alpha: float = 80.0
    theta_beta: float = 13.0
    w_smoothness: float = 3.0
    theta_gamma: float = 3.0
    compat: float = 1.0
    debug: bool = False  # permits n_iters == 0

    def __post_init__(self):
        if self.n_iters < (0 if self.debug else 1):
            raise ValueError(f"crf.n_iters must be >= 1, got {self.n_iters}")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0:
            raise ValueError("CRF bandwidths must be positive")
        if min(self.w_appearance, self.w_smoothness, self.compat) < 0:
            raise ValueError("CRF weights must be non-negative")


def _grid(h: int, w: int, spacing: float, dtype) -> torch.Tensor:
    ys, xs = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
    return torch.stack([ys.reshape(-1), xs.reshape(-1)], dim=1) * spacing


def _sqdist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    d = a @ b.T
    d.mul_(-2).add_((a * a).sum(1)[:, None]).add_((b * b).sum(1)[None, :])
    return d.clamp_min_(0)


def _kernel_rows(pos, col, rows: slice, params: CrfParams) -> torch.Tensor:
    d2 = _sqdist(pos[rows], pos)
    c2 = _sqdist(col[rows], col)
    # exponents clamped at -60 and weights below 1e-20 dropped: keeps the
    # arithmetic out of denormal slow paths, effect far below float precision
    k = c2.mul_(-1 / (2 * params.theta_beta**2)).add_(d2, alpha=-1 / (2 * params.theta_alpha**2))
    k.clamp_min_(-60).exp_().mul_(params.w_appearance)
    smooth = d2.mul_(-1 / (2 * params.theta_gamma**2)).clamp_min_(-60).exp_()
    k.add_(smooth, alpha=params.w_smoothness)
    idx = torch.arange(rows.start, rows.stop)
    k[idx - rows.start, idx] = 0
    k.masked_fill_(k < 1e-20, 0)
    return k


def crf_refine(
    P: torch.Tensor, image: torch.Tensor, params: CrfParams = CrfParams(), spacing: float = 1.0, kernel=None
) -> torch.Tensor:
    """Mean-field refinement of one (K, H, W) probability map.

    ``image`` is (3, H, W) on a 0-255 colour scale; ``spacing`` is the pixel
    distance between neighbouring grid cells (use the stride when running on
    a downsampled grid). Potts compatibility, appearance + smoothness kernels.
    A precomputed ``kernel`` from :func:`pairwise_kernel` may be passed to
    refine several maps of the same image.
    """
    if P.dim() != 3 or image.dim() != 3 or P.shape[1:] != image.shape[1:]:
        raise ValueError(f"misaligned CRF inputs: P {tuple(P.shape)}, image {tuple(image.shape)}")
    if params.n_iters == 0:
        return P.clone()
    K, H, W = P.shape
    n = H * W
    unary = torch.log(P.clamp_min(UNARY_EPS)).reshape(K, n).T.contiguous()
    Q = torch.softmax(unary, dim=1)
    if kernel is None:
        kernel = pairwise_kernel(image, params, spacing, P.dtype)
    for _ in range(params.n_iters):
        msg = kernel(Q)
        pairwise = params.compat * (msg.sum(dim=1, keepdim=True) - msg)
        Q = torch.softmax(unary - pairwise, dim=1)
        Q[Q < 1e-30] = 0  # avoid denormal slow paths
    return Q.T.reshape(K, H, W)


def pairwise_kernel(image: torch.Tensor, params: CrfParams = CrfParams(), spacing: float = 1.0, dtype=torch.float32):
    """Return ``Q -> sum_j k(i, j) Q_j`` for the (3, H, W) ``image``.

    Up to DENSE_LIMIT pixels the n x n kernel is materialised once; beyond
    that it is rebuilt in row chunks on every call (still exact).
    """
    H, W = image.shape[1:]
    n = H * W
    pos = _grid(H, W, spacing, dtype)
    col = image.to(dtype).reshape(3, n).T
    if n <= DENSE_LIMIT:
        dense = _kernel_rows(pos, col, slice(0, n), params)
        return lambda Q: dense @ Q
    chunk = max(1, DENSE_LIMIT * DENSE_LIMIT // n)

    def apply(Q):
        return torch.cat([_kernel_rows(pos, col, slice(s, min(s + chunk, n)), params) @ Q for s in range(0, n, chunk)])

    return apply


def crf_refine_batch(P: torch.Tensor, images: torch.Tensor, params: CrfParams = CrfParams(), spacing: float = 1.0):
    return torch.stack([crf_refine(p, im, params, spacing) for p, im in zip(P, images)])


def harden_labels(P: torch.Tensor, dim: int = -3) -> torch.Tensor:
    """Argmax over the class axis; ties go to the lowest index."""
    top = P.max(dim=dim, keepdim=True).values
    is_top = P == top
    K = P.shape[dim]
    rank = torch.arange(K, 0, -1, device=P.device)
    shape = [1] * P.dim()
    shape[dim] = K
    return (is_top * rank.view(shape)).argmax(dim=dim)


def harden(P: torch.Tensor, dim: int = -3) -> torch.Tensor:
    labels = harden_labels(P, dim)
    onehot = F.one_hot(labels, P.shape[dim]).to(P.dtype)
    return onehot.movedim(-1, dim)
