"""Timestep sampling and the non-saturating adversarial objectives."""
from __future__ import annotations

import hashlib

import numpy as np
import torch

CLAMP_EPS = 1e-7


def derive_seed(root_seed: int, *keys) -> int:
    """Stable 63-bit seed from a root seed and any labels (iteration, stream name, ...).

    Independent of worker count and call order, so every random stream can be
    regenerated from ``(root_seed, keys)`` alone.
    """
    h = hashlib.sha256(repr((int(root_seed),) + tuple(keys)).encode()).digest()
    return int.from_bytes(h[:8], "little") & (2**63 - 1)


def sample_timestep(rng, T: int, size=None):
    """Uniform integer timestep(s) in ``[0, T-1]``.

    ``rng`` may be a ``numpy.random.Generator`` or a ``torch.Generator``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if isinstance(rng, torch.Generator):
        shape = () if size is None else (size,) if isinstance(size, int) else tuple(size)
        return torch.randint(0, T, shape, generator=rng)
    return rng.integers(0, T, size=size)


def _check(scores: torch.Tensor) -> torch.Tensor:
    scores = torch.as_tensor(scores)
    if scores.numel() == 0:
        raise ValueError("empty score batch")
    return scores.clamp(CLAMP_EPS, 1 - CLAMP_EPS)


def generator_adv_loss(fake_scores) -> torch.Tensor:
    """-mean log D(fake), over batch and patches."""
    return -torch.log(_check(fake_scores)).mean()


def discriminator_loss(fake_scores, real_scores) -> torch.Tensor:
    """-mean log(1 - D(fake)) - mean log D(real)."""
    fake = _check(fake_scores)
    real = _check(real_scores)
    return -torch.log1p(-fake).mean() - torch.log(real).mean()


def generator_total_loss(spatial, adv, lambda1: float):
    if lambda1 < 0:
        raise ValueError("lambda1 must be non-negative")
    return spatial + lambda1 * adv


def numpy_rng(root_seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root_seed, *keys))


def torch_rng(root_seed: int, *keys) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(root_seed, *keys))
