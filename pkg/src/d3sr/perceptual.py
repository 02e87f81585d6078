"""Sobel edges, DISTS on a fixed feature pyramid, edge-aware DISTS and the spatial loss."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

SOBEL_X = torch.tensor([[-1.0, 0.0, 1.0],
                        [-2.0, 0.0, 2.0],
                        [-1.0, 0.0, 1.0]], dtype=torch.float64)
SOBEL_Y = SOBEL_X.T.contiguous()

# largest Sobel magnitude reachable on images in [0, 1]
EDGE_SCALE = 1.0 / (4.0 * math.sqrt(2.0))


class _SafeSqrt(torch.autograd.Function):
    """sqrt with a zero (sub)gradient at 0 instead of inf."""

    @staticmethod
    def forward(ctx, x):
        y = x.sqrt()
        ctx.save_for_backward(y)
        return y

    @staticmethod
    def backward(ctx, g):
        (y,) = ctx.saved_tensors
        return torch.where(y > 0, g / (2 * y).clamp_min(torch.finfo(y.dtype).tiny), torch.zeros_like(g))


def sobel_magnitude(x: torch.Tensor) -> torch.Tensor:
    """Per-channel gradient magnitude, cross-correlation with replicate padding.

    Accepts (C, H, W) or (N, C, H, W); output has the same shape.
    """
    if x.numel() == 0:
        raise ValueError("empty image")
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    p = F.pad(x, (1, 1, 1, 1), mode="replicate")
    # differences first, so constant regions cancel exactly
    dx = p[..., :, 2:] - p[..., :, :-2]
    dy = p[..., 2:, :] - p[..., :-2, :]
    gx = dx[..., :-2, :] + 2 * dx[..., 1:-1, :] + dx[..., 2:, :]
    gy = dy[..., :, :-2] + 2 * dy[..., :, 1:-1] + dy[..., :, 2:]
    mag = _SafeSqrt.apply(gx * gx + gy * gy)
    return mag[0] if squeeze else mag


class FeatureExtractor(nn.Module):
    """Identity stage followed by fixed conv/ReLU/avg-pool stages.

    Weights are drawn from a seeded generator (or loaded from a checkpoint
    container) and never trained. ``alpha``/``beta`` hold the per-stage
    structure/texture weights and together sum to one.
    """

    def __init__(self, channels=(3, 16, 32, 64, 64), seed: int = 0, weights=None):
        super().__init__()
        if channels[0] != 3:
            raise ValueError("stage 0 is the raw image and must have 3 channels")
        self.channels = tuple(channels)
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        for cin, cout in zip(channels[:-1], channels[1:]):
            conv = nn.Conv2d(cin, cout, 3, padding=1)
            bound = math.sqrt(6.0 / (cin * 9))
            with torch.no_grad():
                conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
                conv.bias.copy_(torch.rand(conv.bias.shape, generator=gen) * 0.1)
            self.convs.append(conv)
        n = len(channels)
        if weights is None:
            weights = (torch.full((n,), 0.5 / n, dtype=torch.float64),
                       torch.full((n,), 0.5 / n, dtype=torch.float64))
        alpha, beta = (torch.as_tensor(w, dtype=torch.float64) for w in weights)
        if alpha.shape != (n,) or beta.shape != (n,):
            raise ValueError("need one alpha and one beta per stage")
        if (alpha < 0).any() or (beta < 0).any():
            raise ValueError("stage weights must be non-negative")
        if not math.isclose(float(alpha.sum() + beta.sum()), 1.0, rel_tol=1e-9):
            raise ValueError("stage weights must sum to 1")
        self.register_buffer("alpha", alpha)
        self.register_buffer("beta", beta)
        for p in self.parameters():
            p.requires_grad_(False)

    @classmethod
    def identity_only(cls, alpha: float = 0.5, beta: float = 0.5) -> "FeatureExtractor":
        return cls(channels=(3,), weights=([alpha], [beta]))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = [x]
        h = x
        for i, conv in enumerate(self.convs):
            if i > 0:
                h = F.avg_pool2d(h, 2, ceil_mode=True)
            h = F.relu(F.conv2d(h, conv.weight.to(h.dtype), conv.bias.to(h.dtype), padding=1))
            feats.append(h)
        return feats


def dists(x: torch.Tensor, y: torch.Tensor, ex: FeatureExtractor,
          c1: float = 1e-6, c2: float = 1e-6, reduction: str = "mean") -> torch.Tensor:
    """1 - sum_i (alpha_i * structure_i + beta_i * texture_i); 0 for identical inputs.

    Accepts (3, H, W) or batched (N, 3, H, W) images. With ``reduction="none"``
    a per-image tensor is returned.
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    squeeze = x.ndim == 3
    if squeeze:
        x, y = x[None], y[None]
    fx, fy = ex(x), ex(y)
    score = torch.ones(x.shape[0], dtype=x.dtype, device=x.device)
    for i, (a, b) in enumerate(zip(fx, fy)):
        mx = a.mean(dim=(2, 3), keepdim=True)
        my = b.mean(dim=(2, 3), keepdim=True)
        vx = ((a - mx) ** 2).mean(dim=(2, 3))
        vy = ((b - my) ** 2).mean(dim=(2, 3))
        cov = ((a - mx) * (b - my)).mean(dim=(2, 3))
        mx, my = mx[..., 0, 0], my[..., 0, 0]
        structure = (2 * mx * my + c1) / (mx ** 2 + my ** 2 + c1)
        texture = (2 * cov + c2) / (vx + vy + c2)
        w_a = ex.alpha[i].to(x.dtype)
        w_b = ex.beta[i].to(x.dtype)
        score = score - (w_a * structure.mean(dim=1) + w_b * texture.mean(dim=1))
    if reduction == "none":
        return score[0] if squeeze else score
    return score.mean()


def edge_map(x: torch.Tensor) -> torch.Tensor:
    """Sobel magnitude normalised into [0, 1]."""
    return sobel_magnitude(x) * EDGE_SCALE


def ea_dists(x: torch.Tensor, y: torch.Tensor, ex: FeatureExtractor, reduction: str = "mean") -> torch.Tensor:
    return dists(x, y, ex, reduction=reduction) + dists(edge_map(x), edge_map(y), ex, reduction=reduction)


def mse(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    return ((x - y) ** 2).mean()


def spatial_loss(x_hat: torch.Tensor, x_h: torch.Tensor, lambda2: float, ex: FeatureExtractor) -> torch.Tensor:
    """MSE plus ``lambda2`` times edge-aware DISTS."""
    if lambda2 < 0:
        raise ValueError("lambda2 must be non-negative")
    loss = mse(x_hat, x_h)
    if lambda2 == 0:
        return loss
    return loss + lambda2 * ea_dists(x_hat, x_h, ex)
