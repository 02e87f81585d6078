"""Toy corpus, manifests, training-pair sampling and the checkpoint container.

Checkpoint container layout (all integers little-endian)::

    magic    8 bytes   b"D3SRCKPT"
    version  uint32    CONTAINER_VERSION
    hlen     uint64    length of the header
    header   hlen      UTF-8 JSON, sorted keys:
                       {"meta": {...}, "tensors": [{"name", "dtype", "shape",
                        "offset", "nbytes"}, ...]}
    blob     ...       raw C-order array bytes, tensors in name order
    digest   32 bytes  SHA-256 of everything above

Arrays are stored exactly as given, so a load/save round trip is byte-identical.
"""
from __future__ import annotations

import functools
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFont

from .adversarial import derive_seed
from .degradation import DegradationConfig, apply_degradation, make_recipe

IMAGE_SUFFIXES = (".png",)
MAGIC = b"D3SRCKPT"
CONTAINER_VERSION = 1
_ALLOWED_DTYPES = {"float16", "float32", "float64", "int64", "int32", "uint8", "bool"}


class DataError(Exception):
    """Unreadable, missing or malformed input data."""


class CheckpointError(Exception):
    """Corrupt, truncated or incompatible checkpoint container."""


# --------------------------------------------------------------------------- images


def read_png(path) -> torch.Tensor:
    """Load an RGB image as a float32 tensor (3, H, W) in [0, 1]."""
    return torch.from_numpy(_read_uint8(str(path)).astype(np.float32) / 255.0).permute(2, 0, 1)


def _read_uint8(path: str) -> np.ndarray:
    try:
        st = os.stat(path)
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return _read_cached(path, st.st_mtime_ns, st.st_size)


@functools.lru_cache(maxsize=256)
def _read_cached(path: str, mtime_ns: int, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot decode image {path}: {e}") from e
    arr.setflags(write=False)
    return arr


def to_uint8(x: torch.Tensor) -> np.ndarray:
    return (x.detach().to(torch.float64).clamp(0, 1) * 255).round().to(torch.uint8).permute(1, 2, 0).cpu().numpy()


def write_png(x: torch.Tensor, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x), "RGB").save(path, format="PNG")


# --------------------------------------------------------------------------- toy corpus


def _checker(rng, size):
    period = int(rng.integers(4, 17))
    angle = rng.uniform(0, np.pi)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = xx * np.cos(angle) + yy * np.sin(angle)
    v = -xx * np.sin(angle) + yy * np.cos(angle)
    mask = ((np.floor(u / period) + np.floor(v / period)) % 2)[..., None]
    c1, c2 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    return mask * c1 + (1 - mask) * c2


def _ramp(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    angle = rng.uniform(0, 2 * np.pi)
    t = (xx * np.cos(angle) + yy * np.sin(angle))
    t = (t - t.min()) / (t.max() - t.min())
    c1, c2 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    return t[..., None] * c1 + (1 - t[..., None]) * c2


def _gabor(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    out = np.zeros((size, size))
    for _ in range(int(rng.integers(20, 40))):
        cx, cy = rng.uniform(0, size, 2)
        sigma = rng.uniform(3, 10)
        freq = rng.uniform(0.08, 0.35)
        theta = rng.uniform(0, np.pi)
        env = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
        out += env * np.cos(2 * np.pi * freq * ((xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)))
    out = (out - out.min()) / (out.max() - out.min() + 1e-12)
    tint = rng.uniform(0.3, 1.0, 3)
    return out[..., None] * tint + (1 - tint) * rng.uniform(0, 1)


def _glyphs(rng, size):
    bg = tuple(int(v) for v in rng.integers(0, 256, 3))
    fg = tuple(255 - v for v in bg)
    im = Image.new("RGB", (size, size), bg)
    draw = ImageDraw.Draw(im)
    font = ImageFont.load_default()
    alphabet = "ABCDEFGHJKLMNPQRSTUVWXYZ0123456789"
    step = 10
    for y in range(0, size, step + 2):
        text = "".join(alphabet[i] for i in rng.integers(0, len(alphabet), size // 6 + 1))
        draw.text((int(rng.integers(-4, 1)), y), text, fill=fg, font=font)
    return np.asarray(im, dtype=np.float64) / 255.0


_TEXTURES = (_checker, _ramp, _gabor, _glyphs)


def make_toy_image(seed: int, size: int = 96) -> np.ndarray:
    """Procedural RGB texture (uint8 H x W x 3); kind cycles with the seed."""
    rng = np.random.default_rng(derive_seed(seed, "toy"))
    img = _TEXTURES[seed % len(_TEXTURES)](rng, size)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_toy_corpus(root, n_train: int = 48, n_val: int = 8, size: int = 96, seed: int = 0) -> Path:
    """Write ``root/train`` and ``root/val`` PNG folders; existing files are overwritten."""
    root = Path(root)
    for split, n, offset in (("train", n_train, 0), ("val", n_val, 10_000)):
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            arr = make_toy_image(seed * 100_000 + offset + i, size)
            Image.fromarray(arr, "RGB").save(d / f"{split}_{i:04d}.png", format="PNG")
    return root


# --------------------------------------------------------------------------- manifest


@dataclass(frozen=True)
class Manifest:
    root: str
    entries: tuple[dict, ...]

    def to_json(self) -> str:
        return json.dumps({"root": self.root, "entries": list(self.entries)}, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        d = json.loads(text)
        return cls(root=d["root"], entries=tuple(d["entries"]))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def path(self, i: int) -> Path:
        return Path(self.root) / self.entries[i]["path"]

    def __len__(self):
        return len(self.entries)


def build_manifest(root) -> Manifest:
    """Sorted listing of the PNG files under ``root`` with sizes and SHA-256 hashes."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    files = sorted(p for p in root.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"no images found in {root}")
    entries = []
    bad = []
    for p in files:
        data = p.read_bytes()
        try:
            arr = _read_uint8(str(p))
        except DataError:
            bad.append(str(p))
            continue
        entries.append({"path": p.name, "height": int(arr.shape[0]), "width": int(arr.shape[1]),
                        "sha256": hashlib.sha256(data).hexdigest()})
    if bad:
        raise DataError("undecodable images: " + ", ".join(bad))
    return Manifest(root=str(root.resolve()), entries=tuple(entries))


# --------------------------------------------------------------------------- pairs


@dataclass
class DatasetSpec:
    root: str
    split: str = "train"
    patch_size: int = 64
    pairing: str = "on_the_fly"
    seed: int = 0
    degradation: DegradationConfig = field(default_factory=DegradationConfig)

    def __post_init__(self):
        if isinstance(self.degradation, dict):
            self.degradation = DegradationConfig.from_dict(self.degradation)
        f = self.degradation.factor
        if self.patch_size <= 0 or self.patch_size % f or self.patch_size % 4:
            raise ValueError(f"patch_size {self.patch_size} must be a positive multiple of 4 and {f}")
        if self.pairing not in ("on_the_fly", "pregenerated"):
            raise ValueError("pairing must be 'on_the_fly' or 'pregenerated'")
        if self.split not in ("train", "val"):
            raise ValueError("split must be 'train' or 'val'")

    @property
    def directory(self) -> Path:
        """Image folder for this split; ``root/<split>`` when present, else ``root``."""
        sub = Path(self.root) / self.split
        base = sub if sub.is_dir() else Path(self.root)
        return base / "hr" if self.pairing == "pregenerated" else base

    def to_dict(self) -> dict:
        d = asdict(self)
        d["degradation"] = self.degradation.to_dict()
        return d


def crop_origin(rng: np.random.Generator, height: int, width: int, patch: int, align: int = 1):
    if height < patch or width < patch:
        raise DataError(f"image {height}x{width} smaller than patch size {patch}")
    top = int(rng.integers(0, (height - patch) // align + 1)) * align
    left = int(rng.integers(0, (width - patch) // align + 1)) * align
    return top, left


def sample_training_pair(manifest: Manifest, spec: DatasetSpec, index: int):
    """Deterministic (x_L, x_H) pair for a global sample index.

    Depends only on ``(manifest, spec.seed, index)``, never on worker layout.
    """
    rng = np.random.default_rng(derive_seed(spec.seed, "pair", index))
    i = int(rng.integers(len(manifest)))
    e = manifest.entries[i]
    p = spec.patch_size
    f = spec.degradation.factor
    if spec.pairing == "pregenerated":
        top, left = crop_origin(rng, e["height"], e["width"], p, align=f)
        hr = read_png(manifest.path(i))
        lr = read_png(Path(manifest.root).parent / "lr" / e["path"])
        x_h = hr[:, top:top + p, left:left + p]
        x_l = lr[:, top // f:(top + p) // f, left // f:(left + p) // f]
        return x_l.clone(), x_h.clone()
    top, left = crop_origin(rng, e["height"], e["width"], p)
    x_h = read_png(manifest.path(i))[:, top:top + p, left:left + p].clone()
    recipe = make_recipe(derive_seed(spec.seed, "recipe", index), spec.degradation)
    return apply_degradation(x_h, recipe), x_h


def sample_batch(manifest: Manifest, spec: DatasetSpec, iteration: int, batch_size: int,
                 workers: int = 1):
    """Stack the pairs with indices ``iteration * batch_size + k``."""
    idx = [iteration * batch_size + k for k in range(batch_size)]
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            pairs = list(pool.map(lambda j: sample_training_pair(manifest, spec, j), idx))
    else:
        pairs = [sample_training_pair(manifest, spec, j) for j in idx]
    return torch.stack([a for a, _ in pairs]), torch.stack([b for _, b in pairs])


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("D3SR_NUM_WORKERS", "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------------- checkpoint container


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    meta: dict


def _encode(arrays: dict, meta: dict) -> bytes:
    tensors, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = arrays[name]
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        a = np.asarray(a, order="C")  # keeps 0-d arrays 0-d
        if a.dtype.name not in _ALLOWED_DTYPES:
            raise TypeError(f"array {name!r} has unsupported dtype {a.dtype}")
        data = a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append({"name": name, "dtype": a.dtype.name, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta, "tensors": tensors}, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<IQ", CONTAINER_VERSION, len(header)) + header + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def _decode(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < len(MAGIC) + 12 + 32 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint container")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{source}: checksum mismatch (truncated or corrupt)")
    version, hlen = struct.unpack("<IQ", body[8:20])
    if version != CONTAINER_VERSION:
        raise CheckpointError(f"{source}: container version {version}, expected {CONTAINER_VERSION}")
    header = json.loads(body[20:20 + hlen])
    blob = body[20 + hlen:]
    arrays = {}
    for t in header["tensors"]:
        chunk = blob[t["offset"]:t["offset"] + t["nbytes"]]
        dt = np.dtype(t["dtype"]).newbyteorder("<")
        arrays[t["name"]] = np.frombuffer(chunk, dtype=dt).reshape(t["shape"]).astype(t["dtype"])
    return Checkpoint(arrays=arrays, meta=header["meta"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Atomic write: the target either keeps its old content or gets the full new one."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = _encode(ckpt.arrays, ckpt.meta)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    return _decode(raw, str(path))


def module_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict, prefix: str = "") -> None:
    sd = module.state_dict()
    missing = [k for k in sd if prefix + k not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    new = {}
    for k, v in sd.items():
        a = torch.from_numpy(np.array(arrays[prefix + k]))
        if tuple(a.shape) != tuple(v.shape):
            raise CheckpointError(f"shape mismatch for {prefix + k}: {tuple(a.shape)} vs {tuple(v.shape)}")
        new[k] = a.to(v.dtype)
    module.load_state_dict(new)
