"""Seeded, replayable LR synthesis: blur, resize, Gaussian noise and JPEG, then a final x4 downscale.

A recipe is a plain record of sampled parameters, so applying it twice gives
byte-identical output. Resize ops are expressed relative to the final LR size;
noise and JPEG therefore act at roughly the LR resolution, as in the
Real-ESRGAN pipeline. JPEG round-trips go through Pillow's libjpeg, so exact
bytes depend on the Pillow build.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .adversarial import derive_seed

RESIZE_MODES = ("bicubic", "bilinear", "nearest")
SIGMA_LIMITS = (0.2, 3.0)
NOISE_LIMITS = (0.0, 25.0 / 255.0)
QUALITY_LIMITS = (30, 95)


@dataclass
class DegradationConfig:
    """Sampling ranges. A range of ``(0, 0)`` (or quality ``(100, 100)``) disables that op."""

    blur_sigma: tuple[float, float] = (0.2, 3.0)
    resize_scale: tuple[float, float] = (0.5, 1.5)
    resize_modes: tuple[str, ...] = RESIZE_MODES
    noise_sigma: tuple[float, float] = (0.0, 25.0 / 255.0)
    jpeg_quality: tuple[int, int] = (30, 95)
    second_order: bool = False
    factor: int = 4

    def __post_init__(self):
        self.blur_sigma = tuple(map(float, self.blur_sigma))
        self.resize_scale = tuple(map(float, self.resize_scale))
        self.noise_sigma = tuple(map(float, self.noise_sigma))
        self.jpeg_quality = tuple(map(int, self.jpeg_quality))
        self.resize_modes = tuple(self.resize_modes)
        self.validate()

    @property
    def blur_enabled(self):
        return self.blur_sigma != (0.0, 0.0)

    @property
    def noise_enabled(self):
        return self.noise_sigma != (0.0, 0.0)

    @property
    def jpeg_enabled(self):
        return self.jpeg_quality != (100, 100)

    def validate(self):
        def rng_ok(name, r, lo, hi):
            if len(r) != 2 or r[0] > r[1] or r[0] < lo or r[1] > hi:
                raise ValueError(f"{name} range {r} must satisfy {lo} <= low <= high <= {hi}")

        if self.blur_enabled:
            rng_ok("blur_sigma", self.blur_sigma, *SIGMA_LIMITS)
        rng_ok("resize_scale", self.resize_scale, 0.25, 4.0)
        if not self.resize_modes or any(m not in RESIZE_MODES for m in self.resize_modes):
            raise ValueError(f"resize_modes must be a non-empty subset of {RESIZE_MODES}")
        rng_ok("noise_sigma", self.noise_sigma, *NOISE_LIMITS)
        if self.jpeg_enabled:
            rng_ok("jpeg_quality", self.jpeg_quality, *QUALITY_LIMITS)
        if self.factor < 1:
            raise ValueError("factor must be >= 1")

    @classmethod
    def identity(cls, factor: int = 4) -> "DegradationConfig":
        return cls(blur_sigma=(0, 0), resize_scale=(1, 1), resize_modes=("bicubic",),
                   noise_sigma=(0, 0), jpeg_quality=(100, 100), factor=factor)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DegradationRecipe:
    seed: int
    ops: list[dict] = field(default_factory=list)
    factor: int = 4

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "factor": self.factor, "ops": self.ops}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DegradationRecipe":
        d = json.loads(text)
        return cls(seed=int(d["seed"]), ops=list(d["ops"]), factor=int(d["factor"]))

    def params(self, op: str, key: str) -> list:
        return [o[key] for o in self.ops if o["op"] == op]


def make_recipe(seed: int, config: DegradationConfig | None = None) -> DegradationRecipe:
    config = config or DegradationConfig()
    rng = np.random.default_rng(derive_seed(seed, "recipe"))
    ops = []
    for _ in range(2 if config.second_order else 1):
        # draws happen unconditionally so enabling one op does not shift the others
        sigma = float(rng.uniform(*config.blur_sigma))
        scale = float(rng.uniform(*config.resize_scale))
        mode = str(config.resize_modes[rng.integers(len(config.resize_modes))])
        noise = float(rng.uniform(*config.noise_sigma))
        quality = int(rng.integers(config.jpeg_quality[0], config.jpeg_quality[1] + 1))
        if config.blur_enabled:
            ops.append({"op": "gaussian_blur", "sigma": sigma})
        ops.append({"op": "resize", "scale": scale, "mode": mode})
        if config.noise_enabled:
            ops.append({"op": "gaussian_noise", "sigma": noise})
        if config.jpeg_enabled:
            ops.append({"op": "jpeg", "quality": quality})
    return DegradationRecipe(seed=int(seed), ops=ops, factor=config.factor)


# --------------------------------------------------------------------------- ops


def gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, math.ceil(3 * sigma))
    k = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-(k ** 2) / (2 * sigma ** 2))
    k = (k / k.sum()).to(x.dtype)
    c = x.shape[0]
    h = F.pad(x[None], (radius, radius, radius, radius), mode="replicate")
    h = F.conv2d(h, k.reshape(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    h = F.conv2d(h, k.reshape(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return h[0]


def resize(x: torch.Tensor, size: tuple[int, int], mode: str) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    if mode == "nearest":
        return F.interpolate(x[None], size=size, mode="nearest")[0]
    return F.interpolate(x[None], size=size, mode=mode, align_corners=False, antialias=True)[0]


def jpeg_roundtrip(x: torch.Tensor, quality: int) -> torch.Tensor:
    arr = (x.clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).numpy()
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="JPEG", quality=int(quality))
    buf.seek(0)
    out = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64) / 255.0
    return torch.from_numpy(out).permute(2, 0, 1).to(x.dtype)


def apply_degradation(x_h: torch.Tensor, recipe: DegradationRecipe) -> torch.Tensor:
    """Synthesize the LR counterpart (3, H/f, W/f) of an HR image in [0, 1]."""
    if x_h.ndim != 3 or x_h.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {tuple(x_h.shape)}")
    f = recipe.factor
    H, W = x_h.shape[-2:]
    if H % f or W % f:
        raise ValueError(f"image size {H}x{W} not divisible by {f}")
    target = (H // f, W // f)
    x = x_h.to(torch.float64)
    for i, op in enumerate(recipe.ops):
        kind = op["op"]
        if kind == "gaussian_blur":
            x = gaussian_blur(x, op["sigma"])
        elif kind == "resize":
            size = (max(1, round(target[0] * op["scale"])), max(1, round(target[1] * op["scale"])))
            x = resize(x, size, op["mode"])
        elif kind == "gaussian_noise":
            rng = np.random.default_rng(derive_seed(recipe.seed, "noise", i))
            x = x + torch.from_numpy(rng.normal(0.0, op["sigma"], size=tuple(x.shape)))
        elif kind == "jpeg":
            x = jpeg_roundtrip(x, op["quality"])
        else:
            raise ValueError(f"unknown degradation op {kind!r}")
        x = x.clamp(0, 1)
    x = resize(x, target, "bicubic").clamp(0, 1)
    return x.to(x_h.dtype)
