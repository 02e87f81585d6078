"""Generator (latent codec + UNet denoiser), diffusion discriminator and low-rank adapters."""
from __future__ import annotations

import math
from typing import Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, predict_clean

PRESETS = {
    "base": (64, 128, 256),
    "large": (96, 192, 384),
}


def _groups(ch: int) -> int:
    return math.gcd(ch, 8)


# --------------------------------------------------------------------------- codec


class LatentCodec(nn.Module):
    """Small convolutional autoencoder, spatial factor 4, 4 latent channels.

    ``scaling_factor`` rescales latents to roughly unit variance after
    pretraining, like the constant used by Stable Diffusion's VAE.
    """

    factor = 4

    def __init__(self, latent_channels: int = 4, width: int = 64):
        super().__init__()
        self.latent_channels = latent_channels
        w2 = width // 2
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w2, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w2, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(width, w2, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w2, 3, 3, padding=1),
        )
        self.register_buffer("scaling_factor", torch.tensor(1.0))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected image of shape (3, H, W), got {tuple(x.shape)}")
        H, W = x.shape[-2:]
        if H % self.factor or W % self.factor:
            raise ValueError(f"image size {H}x{W} not divisible by {self.factor}")
        if x.min() < 0 or x.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        z = self.encoder(x * 2 - 1) * self.scaling_factor
        return z[0] if squeeze else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.ndim == 3
        if squeeze:
            z = z[None]
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ValueError(f"expected latent with {self.latent_channels} channels, got {tuple(z.shape)}")
        x = (self.decoder(z / self.scaling_factor) + 1) / 2
        return x[0] if squeeze else x

    def forward(self, x):
        return self.decode(self.encode(x))


# --------------------------------------------------------------------------- UNet


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    """Input convolution, down blocks and middle block of the UNet.

    This is the part shared between the denoiser and the discriminator.
    """

    def __init__(self, in_channels: int, widths: tuple[int, ...]):
        super().__init__()
        self.widths = tuple(widths)
        self.temb_dim = widths[0] * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(widths[0], self.temb_dim), nn.SiLU(), nn.Linear(self.temb_dim, self.temb_dim))
        self.conv_in = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.down.append(ResBlock(prev, w, self.temb_dim))
            last = i == len(widths) - 1
            self.downsample.append(nn.Identity() if last else nn.Conv2d(w, w, 3, stride=2, padding=1))
            prev = w
        self.mid1 = ResBlock(prev, prev, self.temb_dim)
        self.mid2 = ResBlock(prev, prev, self.temb_dim)

    def embed_time(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, device=like.device)
        if t.ndim == 0:
            t = t.expand(like.shape[0])
        emb = timestep_embedding(t, self.widths[0]).to(like.dtype)
        return self.time_mlp(emb)

    def forward(self, z, t):
        temb = self.embed_time(t, z)
        h = self.conv_in(z)
        skips = []
        for block, down in zip(self.down, self.downsample):
            h = block(h, temb)
            skips.append(h)
            h = down(h)
        h = self.mid1(h, temb)
        h = self.mid2(h, temb)
        return h, skips, temb


class DenoiserNet(nn.Module):
    """Compact noise-prediction UNet. The middle-block output is kept in ``last_mid``."""

    def __init__(self, latent_channels: int = 4, widths=PRESETS["base"]):
        super().__init__()
        widths = tuple(widths)
        self.encoder = Encoder(latent_channels, widths)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        prev = widths[-1]
        for i, w in reversed(list(enumerate(widths))):
            self.up.append(ResBlock(prev + w, w, self.encoder.temb_dim))
            self.upsample.append(nn.Upsample(scale_factor=2, mode="nearest") if i > 0 else nn.Identity())
            prev = w
        self.norm_out = nn.GroupNorm(_groups(prev), prev)
        self.conv_out = nn.Conv2d(prev, latent_channels, 3, padding=1)
        self.last_mid = None
        self.calls = 0

    def mid_shape(self, latent_hw: tuple[int, int]) -> tuple[int, int, int]:
        n = 2 ** (len(self.encoder.widths) - 1)
        return (self.encoder.widths[-1], latent_hw[0] // n, latent_hw[1] // n)

    def forward(self, z, t):
        self.calls += 1
        h, skips, temb = self.encoder(z, t)
        self.last_mid = h
        for block, up, skip in zip(self.up, self.upsample, reversed(skips)):
            h = block(torch.cat([h, skip], dim=1), temb)
            h = up(h)
        return self.conv_out(F.silu(self.norm_out(h)))


class DiscriminatorNet(nn.Module):
    """Down + middle blocks of a UNet with a per-location realism perceptron."""

    def __init__(self, latent_channels: int = 4, widths=PRESETS["base"], hidden: int = 256):
        super().__init__()
        widths = tuple(widths)
        self.backbone = Encoder(latent_channels, widths)
        self.head = nn.Sequential(
            nn.Conv2d(widths[-1], hidden, 1), nn.SiLU(), nn.Conv2d(hidden, 1, 1))

    def features(self, z, t):
        return self.backbone(z, t)[0]

    def logits(self, z, t):
        return self.head(self.features(z, t))[:, 0]

    def forward(self, z, t):
        return torch.sigmoid(self.logits(z, t))


def build_discriminator(preset: str = "base", latent_channels: int = 4, hidden: int = 256) -> DiscriminatorNet:
    if preset not in PRESETS:
        raise ValueError(f"unknown discriminator preset {preset!r}; choose from {sorted(PRESETS)}")
    return DiscriminatorNet(latent_channels, PRESETS[preset], hidden)


# --------------------------------------------------------------------------- adapters


class LoRAConv2d(nn.Module):
    """Frozen conv plus a trainable low-rank update ``(alpha / rank) * B @ A``.

    A has shape (rank, in*k*k), B has shape (out, rank) and starts at zero,
    so the adapted layer initially reproduces the base layer exactly.
    """

    def __init__(self, base: nn.Conv2d, rank: int, alpha: float):
        super().__init__()
        d_out = base.out_channels
        d_in = base.in_channels // base.groups * base.kernel_size[0] * base.kernel_size[1]
        if rank < 1 or rank > min(d_in, d_out):
            raise ValueError(f"rank {rank} invalid for weight of shape ({d_out}, {d_in})")
        self.base = base
        for p in base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.alpha = float(alpha)
        self.lora_A = nn.Parameter(torch.empty(rank, d_in, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank, dtype=base.weight.dtype))
        nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta_weight(self) -> torch.Tensor:
        return (self.scale * (self.lora_B @ self.lora_A)).reshape(self.base.weight.shape)

    def forward(self, x):
        b = self.base
        return F.conv2d(x, b.weight + self.delta_weight(), b.bias, b.stride, b.padding, b.dilation, b.groups)


def conv_names(module: nn.Module, prefixes: Iterable[str] = ("",), rank: int | None = None) -> list[str]:
    """Names of Conv2d submodules under any of ``prefixes``; optionally only those wide enough for ``rank``."""
    out = []
    for name, m in module.named_modules():
        if not isinstance(m, nn.Conv2d) or isinstance(m, LoRAConv2d):
            continue
        if not any(name.startswith(p) for p in prefixes):
            continue
        if rank is not None:
            d_in = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
            if rank > min(d_in, m.out_channels):
                continue
        out.append(name)
    return out


def apply_low_rank_adapters(net: nn.Module, rank: int = 16, alpha: float = 16.0,
                            attachment: Iterable[str] | None = None,
                            trainable: Iterable[str] = ()) -> nn.Module:
    """Wrap the named convolutions with adapters and freeze every other weight.

    ``attachment`` defaults to every conv layer whose dimensions admit ``rank``.
    Parameters whose names start with any entry of ``trainable`` (e.g. a
    freshly initialised head) stay trainable. Modifies ``net`` in place.
    """
    if attachment is None:
        attachment = conv_names(net, rank=rank)
    attachment = list(attachment)
    modules = dict(net.named_modules())
    for name in attachment:
        if name not in modules:
            raise KeyError(f"no submodule named {name!r}")
        if not isinstance(modules[name], nn.Conv2d):
            raise TypeError(f"{name!r} is not a Conv2d")
    for p in net.parameters():
        p.requires_grad_(False)
    for name in attachment:
        parent_name, _, child = name.rpartition(".")
        parent = modules[parent_name] if parent_name else net
        setattr(parent, child, LoRAConv2d(modules[name], rank, alpha))
    trainable = tuple(trainable)
    for pname, p in net.named_parameters():
        if "lora_" in pname or (trainable and pname.startswith(trainable)):
            p.requires_grad_(True)
    net.adapter_config = {"rank": rank, "alpha": alpha, "attachment": sorted(attachment)}
    return net


def adapter_parameters(net: nn.Module) -> list[nn.Parameter]:
    return [p for n, p in net.named_parameters() if "lora_" in n]


def adapt_denoiser(net: DenoiserNet, rank: int = 16, alpha: float = 16.0) -> DenoiserNet:
    return apply_low_rank_adapters(net, rank, alpha, conv_names(net, rank=rank))


def adapt_discriminator(net: DiscriminatorNet, rank: int = 16, alpha: float = 16.0) -> DiscriminatorNet:
    names = conv_names(net, prefixes=("backbone.down", "backbone.downsample", "backbone.mid"), rank=rank)
    return apply_low_rank_adapters(net, rank, alpha, names, trainable=("head.",))


# --------------------------------------------------------------------------- generator


class Generator(nn.Module):
    """Frozen codec plus adapted denoiser, evaluated once at a fixed timestep."""

    def __init__(self, codec: LatentCodec, denoiser: DenoiserNet, schedule: NoiseSchedule, t_l: int):
        super().__init__()
        schedule.check_t(t_l)
        self.codec = codec
        self.denoiser = denoiser
        self.schedule = schedule
        self.t_l = int(t_l)
        for p in codec.parameters():
            p.requires_grad_(False)

    def forward(self, x_l_up):
        return generate(x_l_up, self.t_l, self.codec, self.denoiser, self.schedule)


def upsample_lr(x_l: torch.Tensor, factor: int = 4) -> torch.Tensor:
    """Bicubic upsampling of the LR input to the target resolution, clamped to [0, 1]."""
    squeeze = x_l.ndim == 3
    x = x_l[None] if squeeze else x_l
    x = F.interpolate(x, scale_factor=factor, mode="bicubic", align_corners=False).clamp(0, 1)
    return x[0] if squeeze else x


def generate(x_l_up: torch.Tensor, t_l: int, codec: LatentCodec, denoiser: DenoiserNet,
             schedule: NoiseSchedule):
    """One-step super-resolution of an LR image already upsampled to the target size.

    Returns ``(x_hat_h, z_hat_h)``.
    """
    schedule.check_t(t_l)
    z_l = codec.encode(x_l_up)
    batched = z_l.ndim == 4
    z_in = z_l if batched else z_l[None]
    eps_hat = denoiser(z_in, t_l)
    z_hat = predict_clean(z_in, eps_hat, t_l, schedule)
    x_hat = codec.decode(z_hat)
    if not batched:
        x_hat, z_hat = x_hat[0], z_hat[0]
    return x_hat, z_hat


def discriminate(z_noisy: torch.Tensor, t, disc: DiscriminatorNet, latent_shape=None,
                 schedule: NoiseSchedule | None = None) -> torch.Tensor:
    """Patch realism scores in (0, 1) at the middle-block resolution.

    With a ``schedule`` the timestep is also checked against its upper bound.
    """
    batched = z_noisy.ndim == 4
    z = z_noisy if batched else z_noisy[None]
    if latent_shape is not None and tuple(z.shape[1:]) != tuple(latent_shape):
        raise ValueError(f"latent shape {tuple(z.shape[1:])} != expected {tuple(latent_shape)}")
    t = torch.as_tensor(t)
    if t.dtype.is_floating_point or (t.numel() and int(t.min()) < 0):
        raise ValueError(f"invalid timestep {t}")
    if schedule is not None:
        schedule.check_t(t)
    scores = disc(z, t)
    return scores if batched else scores[0]
