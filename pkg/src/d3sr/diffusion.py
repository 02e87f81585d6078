"""Noise schedule, forward diffusion and one-step clean-latent prediction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule over ``T`` steps, stored in float64.

    Timesteps are 0-based: valid indices are ``0 .. T-1``.
    """

    T: int
    beta_start: float = 1e-4
    beta_end: float = 0.02
    beta: np.ndarray = field(init=False, repr=False, compare=False)
    alpha: np.ndarray = field(init=False, repr=False, compare=False)
    alpha_bar: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T}")
        if not (0.0 < self.beta_start < 1.0 and 0.0 < self.beta_end < 1.0):
            raise ValueError(
                f"betas must lie in (0, 1), got {self.beta_start}, {self.beta_end}")
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        beta = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        alpha = 1.0 - beta
        # running product, one multiply per step, so alpha_bar[t] == alpha_bar[t-1] * alpha[t]
        alpha_bar = np.empty_like(alpha)
        acc = 1.0
        for i, a in enumerate(alpha):
            acc = acc * a
            alpha_bar[i] = acc
        for name, arr in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def check_t(self, t) -> None:
        ts = torch.as_tensor(t)
        if ts.dtype.is_floating_point:
            raise TypeError("timesteps must be integers")
        if ts.numel() and (int(ts.min()) < 0 or int(ts.max()) >= self.T):
            raise IndexError(f"timestep out of range [0, {self.T - 1}]: {t}")

    def coefficients(self, t, like: torch.Tensor):
        """Return (sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) broadcastable against ``like``.

        ``t`` is either a scalar (applies to the whole tensor) or a 1-D tensor
        with one timestep per leading-axis item.
        """
        self.check_t(t)
        idx = torch.as_tensor(t, dtype=torch.long).cpu()
        ab = torch.tensor(self.alpha_bar)[idx]
        a = ab.sqrt().to(dtype=like.dtype, device=like.device)
        b = (1.0 - ab).sqrt().to(dtype=like.dtype, device=like.device)
        if idx.ndim == 1:
            if idx.shape[0] != like.shape[0]:
                raise ValueError("one timestep per batch item expected")
            shape = (-1,) + (1,) * (like.ndim - 1)
            a, b = a.reshape(shape), b.reshape(shape)
        elif idx.ndim > 1:
            raise ValueError("timesteps must be a scalar or 1-D")
        return a, b

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    return NoiseSchedule(T, beta_start, beta_end)


def forward_diffuse(z: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """F(z, t) = sqrt(abar_t) z + sqrt(1 - abar_t) eps."""
    if z.shape != eps.shape:
        raise ValueError(f"shape mismatch: z {tuple(z.shape)} vs eps {tuple(eps.shape)}")
    a, b = schedule.coefficients(t, z)
    return a * z + b * eps


def predict_clean(z_t: torch.Tensor, eps_hat: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert the forward process given a noise prediction."""
    if z_t.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: z_t {tuple(z_t.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    a, b = schedule.coefficients(t, z_t)
    out = (z_t - b * eps_hat) / a
    if not torch.isfinite(out).all():
        raise FloatingPointError("non-finite values in clean-latent prediction")
    return out
