"""2-D projection of discriminator middle-block features for real vs generated latents."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from .adversarial import torch_rng
from .diffusion import forward_diffuse
from .networks import upsample_lr


@torch.no_grad()
def midblock_features(gen, disc, pairs, t: int = 0, seed: int = 0, channels: int = 100):
    """Spatially pooled middle-block activations, first ``channels`` channels.

    Returns ``(real, fake)`` arrays of shape (N, channels).
    """
    x_l = torch.stack([a for a, _ in pairs])
    x_h = torch.stack([b for _, b in pairs])
    _, z_fake = gen(upsample_lr(x_l))
    z_real = gen.codec.encode(x_h)
    rng = torch_rng(seed, "features")
    out = []
    for z in (z_real, z_fake):
        eps = torch.randn(z.shape, generator=rng, dtype=z.dtype)
        f = disc.features(forward_diffuse(z, t, eps, gen.schedule), torch.full((z.shape[0],), t))
        out.append(f.mean(dim=(2, 3))[:, :channels].double().numpy())
    return out[0], out[1]


def pca_2d(x: np.ndarray) -> np.ndarray:
    """Project rows onto the top two principal axes; each axis sign is fixed so its largest loading is positive."""
    xc = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    axes = vt[:2]
    signs = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(axis=1)])
    axes = axes * signs[:, None]
    proj = xc @ axes.T
    if proj.shape[1] < 2:
        proj = np.pad(proj, ((0, 0), (0, 2 - proj.shape[1])))
    return proj


def project_features(real: np.ndarray, fake: np.ndarray):
    """Rows ``(label, pc1, pc2)`` for real then generated samples, plus centroid distance."""
    proj = pca_2d(np.concatenate([real, fake]))
    n = len(real)
    rows = [("real", float(p[0]), float(p[1])) for p in proj[:n]]
    rows += [("generated", float(p[0]), float(p[1])) for p in proj[n:]]
    dist = float(np.linalg.norm(proj[:n].mean(axis=0) - proj[n:].mean(axis=0)))
    return rows, dist


def write_projection(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("label", "pc1", "pc2"))
        for label, a, b in rows:
            w.writerow((label, repr(a), repr(b)))


def render_projection(rows, path) -> bool:
    """Scatter plot; returns False instead of raising when rendering is unavailable."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except Exception:
        return False
    try:
        fig, ax = plt.subplots(figsize=(4, 4), dpi=100)
        for label, color in (("real", "tab:blue"), ("generated", "tab:orange")):
            pts = np.array([(a, b) for lab, a, b in rows if lab == label])
            if len(pts):
                ax.scatter(pts[:, 0], pts[:, 1], s=12, c=color, label=label)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
        return True
    except Exception:
        return False
