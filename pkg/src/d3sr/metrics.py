"""Full-reference metrics (PSNR-Y, SSIM-Y, DISTS) and dataset evaluation reports."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F

from .dataio import DataError, build_manifest, read_png
from .perceptual import FeatureExtractor, dists

BT601 = (0.299, 0.587, 0.114)


def rgb_to_y(x: torch.Tensor) -> torch.Tensor:
    """BT.601 full-range luma of a (3, H, W) image in [0, 1]."""
    if x.ndim != 3 or x.shape[0] != 3:
        raise ValueError(f"expected (3, H, W) image, got {tuple(x.shape)}")
    x = x.to(torch.float64)
    return BT601[0] * x[0] + BT601[1] * x[1] + BT601[2] * x[2]


def _check_pair(x, y):
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def psnr_y(x: torch.Tensor, y: torch.Tensor) -> float:
    """PSNR on the Y channel in dB; ``math.inf`` for identical luma."""
    _check_pair(x, y)
    err = float(((rgb_to_y(x) - rgb_to_y(y)) ** 2).mean())
    if err == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    g = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(g ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim_y(x: torch.Tensor, y: torch.Tensor, window: int = 11, sigma: float = 1.5,
           k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over valid windows of the Y channel (data range 1)."""
    _check_pair(x, y)
    a, b = rgb_to_y(x), rgb_to_y(y)
    if min(a.shape) < window:
        raise ValueError(f"image {tuple(a.shape)} smaller than the {window}x{window} window")
    w = gaussian_window(window, sigma)[None, None]
    c1, c2 = k1 ** 2, k2 ** 2

    def filt(t):
        return F.conv2d(t[None, None], w)[0, 0]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    dataset: str = ""
    checkpoint: str = ""

    COLUMNS = ("psnr_y", "ssim_y", "dists")

    def means(self) -> dict:
        n = len(self.rows)
        return {c: (sum(r[c] for r in self.rows) / n if n else math.nan) for c in self.COLUMNS}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("image",) + self.COLUMNS)
        for r in self.rows:
            w.writerow([r["image"]] + [repr(float(r[c])) for c in self.COLUMNS])
        return buf.getvalue()

    def summary(self) -> str:
        m = self.means()
        lines = [
            "# summary",
            f"dataset = {self.dataset}",
            f"checkpoint = {self.checkpoint}",
            f"images = {len(self.rows)}",
        ]
        lines += [f"mean_{c} = {m[c]!r}" for c in self.COLUMNS]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())
        path.with_suffix(".summary.txt").write_text(self.summary())

    @classmethod
    def read_csv(cls, path) -> "MetricReport":
        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append({"image": r["image"], **{c: float(r[c]) for c in cls.COLUMNS}})
        return cls(rows=rows)


def load_eval_pairs(root):
    """``root/lr/*.png`` and ``root/hr/*.png`` with matching names."""
    root = Path(root)
    hr_dir, lr_dir = root / "hr", root / "lr"
    if not hr_dir.is_dir():
        raise DataError(f"missing ground-truth folder {hr_dir}")
    if not lr_dir.is_dir():
        raise DataError(f"missing LR folder {lr_dir}")
    manifest = build_manifest(lr_dir)
    pairs = []
    for e in manifest.entries:
        hr_path = hr_dir / e["path"]
        if not hr_path.exists():
            raise DataError(f"missing ground truth for {e['path']}")
        pairs.append((e["path"], read_png(lr_dir / e["path"]), read_png(hr_path)))
    return pairs, manifest


def evaluate_dataset(sr_fn: Callable[[torch.Tensor], torch.Tensor] | str, pairs, extractor: FeatureExtractor | None = None,
                     dataset: str = "", checkpoint: str = "") -> MetricReport:
    """Run ``sr_fn`` (LR (3,h,w) -> SR (3,H,W)) on every pair and score it against HR.

    ``sr_fn="oracle"`` returns the ground truth itself, which pins the metric
    end points (PSNR inf, SSIM 1, DISTS 0).
    """
    extractor = extractor or FeatureExtractor()
    report = MetricReport(dataset=dataset, checkpoint=checkpoint)
    for name, x_l, x_h in pairs:
        if isinstance(sr_fn, str):
            if sr_fn != "oracle":
                raise ValueError(f"unknown stub {sr_fn!r}")
            sr = x_h
        else:
            with torch.no_grad():
                sr = sr_fn(x_l).clamp(0, 1)
        if sr.shape != x_h.shape:
            raise ValueError(f"{name}: output {tuple(sr.shape)} does not match ground truth {tuple(x_h.shape)}")
        sr64, hr64 = sr.to(torch.float64), x_h.to(torch.float64)
        report.rows.append({
            "image": name,
            "psnr_y": psnr_y(sr64, hr64),
            "ssim_y": ssim_y(sr64, hr64),
            "dists": float(dists(sr64, hr64, extractor.double())),
        })
    return report


def baseline(kind: str, factor: int = 4) -> Callable:
    """Reference upscalers for sanity checks: ``bicubic`` or ``nearest``."""
    def fn(x_l):
        mode = {"bicubic": "bicubic", "nearest": "nearest"}[kind]
        kw = {} if mode == "nearest" else {"align_corners": False}
        return F.interpolate(x_l[None], scale_factor=factor, mode=mode, **kw)[0]
    if kind not in ("bicubic", "nearest"):
        raise ValueError(f"unknown baseline {kind!r}")
    return fn
