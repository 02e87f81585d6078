"""Alternating adversarial training of the one-step generator against the diffusion discriminator.

Every iteration runs one generator forward pass, one discriminator update on
detached generator latents, then one generator update on
``spatial + lambda1 * adversarial``. All randomness is drawn from streams
derived from ``(seed, iteration, purpose)``, so a resumed run replays exactly.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adversarial import (
    derive_seed, discriminator_loss, generator_adv_loss, generator_total_loss, sample_timestep,
    torch_rng,
)
from .dataio import (
    Checkpoint, CheckpointError, DatasetSpec, build_manifest, load_checkpoint, load_module_arrays,
    module_arrays, num_workers, sample_batch, sample_training_pair, save_checkpoint,
)
from .diffusion import NoiseSchedule, forward_diffuse
from .networks import (
    PRESETS, DenoiserNet, Generator, LatentCodec, adapt_denoiser, adapt_discriminator,
    adapter_parameters, build_discriminator, upsample_lr,
)
from .perceptual import FeatureExtractor, dists, spatial_loss

log = logging.getLogger(__name__)

STATE_VERSION = 1


class ConfigError(ValueError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Run configuration. Loss weights and ``t_l`` are assumed values, see README."""

    lambda1: float = 0.1
    lambda2: float = 1.0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_l: int | None = None  # defaults to T // 2
    lr_g: float = 5e-5
    lr_d: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-2
    batch_size: int = 4
    iterations: int = 3000
    rank: int = 16
    lora_alpha: float = 16.0
    generator_preset: str = "base"
    discriminator: str = "base"  # "none", "base" or "large"
    head_hidden: int = 256
    seed: int = 0
    eval_every: int = 500
    eval_samples: int = 16
    checkpoint_every: int = 0
    extractor_seed: int = 0
    extractor_weights: str | None = None
    codec_checkpoint: str | None = None
    codec_pretrain_steps: int = 2000
    codec_pretrain_lr: float = 2e-3
    dataset: DatasetSpec | None = None

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetSpec(**self.dataset)
        self.betas = tuple(float(b) for b in self.betas)
        if self.t_l is None:
            self.t_l = self.T // 2
        self.validate()

    def validate(self):
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        for name in ("lambda1", "lambda2", "weight_decay", "lr_g", "lr_d"):
            v = getattr(self, name)
            need(isinstance(v, (int, float)) and math.isfinite(v) and v >= 0, name, f"must be >= 0, got {v}")
        need(isinstance(self.T, int) and self.T >= 1, "T", "must be a positive integer")
        need(0 < self.beta_start <= self.beta_end < 1, "beta_start", "need 0 < beta_start <= beta_end < 1")
        need(isinstance(self.t_l, int) and 0 <= self.t_l < self.T, "t_l", f"must lie in [0, {self.T})")
        need(all(0 <= b < 1 for b in self.betas) and len(self.betas) == 2, "betas", "need two values in [0, 1)")
        for name in ("batch_size", "iterations", "rank", "head_hidden", "eval_samples"):
            v = getattr(self, name)
            need(isinstance(v, int) and v > 0, name, f"must be a positive integer, got {v}")
        need(self.lora_alpha > 0, "lora_alpha", "must be positive")
        for name in ("eval_every", "checkpoint_every", "codec_pretrain_steps"):
            need(isinstance(getattr(self, name), int) and getattr(self, name) >= 0, name, "must be >= 0")
        need(self.generator_preset in PRESETS, "generator_preset", f"must be one of {sorted(PRESETS)}")
        need(self.discriminator in ("none", *PRESETS), "discriminator",
             f"must be 'none' or one of {sorted(PRESETS)}")

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.T, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["betas"] = list(self.betas)
        d["dataset"] = self.dataset.to_dict() if self.dataset else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown configuration key")
        try:
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError("dataset", str(e)) from e

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError("<file>", f"not valid JSON: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("<file>", "top level must be an object")
        return cls.from_dict(d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    disc: torch.nn.Module | None
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer | None
    iteration: int = 0
    history: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    dump_dir: Path | None = None


# --------------------------------------------------------------------------- construction


@contextmanager
def _seeded(seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def build_denoiser(config: TrainConfig) -> DenoiserNet:
    with _seeded(derive_seed(config.seed, "init", "denoiser")):
        net = DenoiserNet(4, PRESETS[config.generator_preset])
        return adapt_denoiser(net, config.rank, config.lora_alpha)


def build_disc(config: TrainConfig):
    if config.discriminator == "none":
        return None
    with _seeded(derive_seed(config.seed, "init", "disc", config.discriminator)):
        net = build_discriminator(config.discriminator, 4, config.head_hidden)
        return adapt_discriminator(net, config.rank, config.lora_alpha)


def _adamw(params_wd, params_no_wd, config: TrainConfig, lr: float):
    groups = [{"params": params_wd, "weight_decay": config.weight_decay}]
    if params_no_wd:
        groups.append({"params": params_no_wd, "weight_decay": 0.0})
    return torch.optim.AdamW(groups, lr=lr, betas=config.betas)


def build_state(config: TrainConfig, codec: LatentCodec) -> TrainState:
    denoiser = build_denoiser(config)
    gen = Generator(codec, denoiser, config.schedule, config.t_l)
    opt_g = _adamw(adapter_parameters(denoiser), [], config, config.lr_g)
    disc = build_disc(config)
    opt_d = None
    if disc is not None:
        head = [p for n, p in disc.named_parameters() if n.startswith("head.")]
        opt_d = _adamw(adapter_parameters(disc), head, config, config.lr_d)
    return TrainState(config, gen, disc, opt_g, opt_d)


def build_extractor(config: TrainConfig) -> FeatureExtractor:
    if config.extractor_weights:
        return load_extractor(config.extractor_weights)
    return FeatureExtractor(seed=config.extractor_seed)


def load_extractor(path) -> FeatureExtractor:
    """Feature extractor from a checkpoint container with ``convs.<i>.weight/bias``, ``alpha``, ``beta``."""
    ck = load_checkpoint(path)
    n = len([k for k in ck.arrays if k.startswith("convs.") and k.endswith(".weight")])
    channels = [3] + [int(ck.arrays[f"convs.{i}.weight"].shape[0]) for i in range(n)]
    ex = FeatureExtractor(channels=tuple(channels), weights=(ck.arrays["alpha"], ck.arrays["beta"]))
    load_module_arrays(ex, ck.arrays)
    return ex


# --------------------------------------------------------------------------- step


@contextmanager
def _frozen(module):
    if module is None:
        yield
        return
    flags = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in flags:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in flags:
            p.requires_grad_(flag)


def _noisy(z, rng, T, schedule):
    t = sample_timestep(rng, T, z.shape[0])
    eps = torch.randn(z.shape, generator=rng, dtype=z.dtype)
    return forward_diffuse(z, t, eps, schedule), t


def generator_objective(x_hat, z_hat, x_h, disc, t, eps, schedule, extractor, lambda1, lambda2):
    """``spatial + lambda1 * adversarial`` for one batch; returns ``(total, spatial, adv)``.

    The adversarial term scores ``F(z_hat, t)`` built from the given ``t`` and
    ``eps``. Without a discriminator ``adv`` is None and ``total`` is the spatial loss.
    """
    spatial = spatial_loss(x_hat, x_h, lambda2, extractor)
    if disc is None:
        return spatial, spatial, None
    adv = generator_adv_loss(disc(forward_diffuse(z_hat, t, eps, schedule), t))
    return generator_total_loss(spatial, adv, lambda1), spatial, adv


def train_step(state: TrainState, batch, extractor: FeatureExtractor) -> dict:
    """One D update followed by one G update; returns the step log."""
    cfg = state.config
    gen, disc = state.generator, state.disc
    schedule = gen.schedule
    it = state.iteration
    x_l, x_h = batch
    t0 = time.perf_counter()

    x_hat, z_hat = gen(upsample_lr(x_l))
    with torch.no_grad():
        z_h = gen.codec.encode(x_h)

    rec = {"iteration": it}
    if disc is not None:
        d_rng = torch_rng(cfg.seed, "d-step", it)
        fake_in, t_fake = _noisy(z_hat.detach(), d_rng, cfg.T, schedule)
        real_in, t_real = _noisy(z_h, d_rng, cfg.T, schedule)
        # one pass over fake and real; GroupNorm keeps items independent
        scores = disc(torch.cat([fake_in, real_in]), torch.cat([t_fake, t_real]))
        s_fake, s_real = scores.chunk(2)
        loss_d = discriminator_loss(s_fake, s_real)
        _check_finite(loss_d, "L_D", state, batch)
        state.opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        state.opt_d.step()
        rec.update(L_D=loss_d.item(), real_score=s_real.mean().item(), fake_score=s_fake.mean().item())

    t1 = time.perf_counter()
    t_adv = eps = None
    if disc is not None:
        g_rng = torch_rng(cfg.seed, "g-step", it)
        t_adv = sample_timestep(g_rng, cfg.T, z_hat.shape[0])
        eps = torch.randn(z_hat.shape, generator=g_rng, dtype=z_hat.dtype)
    with _frozen(disc):
        total, spatial, adv = generator_objective(x_hat, z_hat, x_h, disc, t_adv, eps, schedule, extractor,
                                                  cfg.lambda1, cfg.lambda2)
    if adv is not None:
        rec["L_G_adv"] = adv.item()
    _check_finite(total, "L_G", state, batch)
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    rec.update(L_spatial=spatial.item(), L_G=total.item(),
               time_d=t1 - t0, time_g=time.perf_counter() - t1)
    state.iteration += 1
    state.history.append({k: v for k, v in rec.items() if not k.startswith("time")})
    return rec


def _check_finite(loss, name, state, batch):
    if torch.isfinite(loss):
        return
    bs = state.config.batch_size
    first = state.iteration * bs
    msg = (f"non-finite {name} at iteration {state.iteration} "
           f"(batch sample indices {first}..{first + bs - 1})")
    dump = getattr(state, "dump_dir", None)
    if dump is not None:
        path = Path(dump) / f"diverged_{state.iteration:07d}.ckpt"
        save_checkpoint(Checkpoint({"x_l": batch[0], "x_h": batch[1]},
                                   {"iteration": state.iteration, "loss": name, "first_index": first}), path)
        msg += f"; batch dumped to {path}"
    raise TrainingDiverged(msg)


# --------------------------------------------------------------------------- evaluation


def heldout_pairs(config: TrainConfig, n: int | None = None):
    spec = dataclasses.replace(config.dataset, split="val", seed=derive_seed(config.dataset.seed, "val"))
    manifest = build_manifest(spec.directory)
    n = config.eval_samples if n is None else n
    return [sample_training_pair(manifest, spec, k) for k in range(n)]


@torch.no_grad()
def evaluate_heldout(state: TrainState, pairs, extractor: FeatureExtractor) -> dict:
    """Mean DISTS of generated images and mean discriminator scores on held-out pairs."""
    cfg = state.config
    gen, disc = state.generator, state.disc
    x_l = torch.stack([a for a, _ in pairs])
    x_h = torch.stack([b for _, b in pairs])
    x_hat, z_hat = gen(upsample_lr(x_l))
    dtype = next(extractor.parameters(), extractor.alpha).dtype
    d = dists(x_hat.clamp(0, 1).double(), x_h.double(), extractor.double(), reduction="none")
    extractor.to(dtype)
    out = {"iteration": state.iteration, "dists": float(d.mean()),
           "mse": float(((x_hat.clamp(0, 1) - x_h) ** 2).mean())}
    if disc is not None:
        z_h = gen.codec.encode(x_h)
        rng = torch_rng(cfg.seed, "eval")
        fake_in, t_f = _noisy(z_hat, rng, cfg.T, gen.schedule)
        real_in, t_r = _noisy(z_h, rng, cfg.T, gen.schedule)
        out["fake_score"] = float(disc(fake_in, t_f).mean())
        out["real_score"] = float(disc(real_in, t_r).mean())
    return out


# --------------------------------------------------------------------------- checkpoint conversion


def _optim_arrays(opt, prefix):
    arrays, meta = {}, {}
    if opt is None:
        return arrays, meta
    sd = opt.state_dict()
    for idx, st in sd["state"].items():
        for k, v in st.items():
            arrays[f"{prefix}.state.{idx}.{k}"] = v.detach().cpu().numpy().copy()
    meta = {"param_groups": sd["param_groups"]}
    return arrays, meta


def _load_optim(opt, arrays, meta, prefix):
    state: dict = {}
    head = prefix + ".state."
    for name, a in arrays.items():
        if name.startswith(head):
            idx, key = name[len(head):].split(".", 1)
            state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(a))
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def state_to_checkpoint(state: TrainState) -> Checkpoint:
    cfg = state.config
    gen = state.generator
    arrays = {}
    arrays.update(module_arrays(gen.codec, "codec."))
    arrays.update(module_arrays(gen.denoiser, "denoiser."))
    if state.disc is not None:
        arrays.update(module_arrays(state.disc, "disc."))
    a_g, m_g = _optim_arrays(state.opt_g, "opt_g")
    a_d, m_d = _optim_arrays(state.opt_d, "opt_d")
    arrays.update(a_g)
    arrays.update(a_d)
    meta = {
        "kind": "train_state",
        "state_version": STATE_VERSION,
        "iteration": state.iteration,
        "config": cfg.to_dict(),
        "preset": cfg.generator_preset,
        "discriminator": cfg.discriminator,
        "rank": cfg.rank,
        "alpha": cfg.lora_alpha,
        "schedule": gen.schedule.to_dict(),
        "t_l": gen.t_l,
        # every random stream is derived from (seed, iteration, purpose)
        "rng": {"root_seed": cfg.seed, "scheme": "sha256(seed, stream, iteration)"},
        "opt_g": m_g,
        "opt_d": m_d,
        "history": state.history,
        "evals": state.evals,
    }
    return Checkpoint(arrays, meta)


def _check_meta(ck: Checkpoint, kind: str):
    if ck.meta.get("kind") != kind:
        raise CheckpointError(f"expected a {kind!r} checkpoint, found {ck.meta.get('kind')!r}")
    if kind == "train_state" and ck.meta.get("state_version") != STATE_VERSION:
        raise CheckpointError(f"state version {ck.meta.get('state_version')} != {STATE_VERSION}")


def state_from_checkpoint(ck: Checkpoint, config: TrainConfig | None = None) -> TrainState:
    """Rebuild a full training state. Nothing is mutated if the checkpoint is unusable."""
    _check_meta(ck, "train_state")
    config = config or TrainConfig.from_dict(ck.meta["config"])
    codec = LatentCodec()
    load_module_arrays(codec, ck.arrays, "codec.")
    state = build_state(config, codec)
    load_module_arrays(state.generator.denoiser, ck.arrays, "denoiser.")
    if state.disc is not None:
        load_module_arrays(state.disc, ck.arrays, "disc.")
    _load_optim(state.opt_g, ck.arrays, ck.meta["opt_g"], "opt_g")
    if state.opt_d is not None:
        _load_optim(state.opt_d, ck.arrays, ck.meta["opt_d"], "opt_d")
    state.iteration = int(ck.meta["iteration"])
    state.history = list(ck.meta.get("history", []))
    state.evals = list(ck.meta.get("evals", []))
    return state


def load_generator(path) -> Generator:
    """Inference-only generator (codec + adapted denoiser) from a training checkpoint."""
    ck = load_checkpoint(path)
    _check_meta(ck, "train_state")
    m = ck.meta
    codec = LatentCodec()
    load_module_arrays(codec, ck.arrays, "codec.")
    denoiser = adapt_denoiser(DenoiserNet(4, PRESETS[m["preset"]]), m["rank"], m["alpha"])
    load_module_arrays(denoiser, ck.arrays, "denoiser.")
    s = m["schedule"]
    gen = Generator(codec, denoiser, NoiseSchedule(s["T"], s["beta_start"], s["beta_end"]), m["t_l"])
    return gen.eval()


def save_codec(codec: LatentCodec, path, meta: dict | None = None) -> None:
    save_checkpoint(Checkpoint(module_arrays(codec), {"kind": "codec", **(meta or {})}), path)


def load_codec(path) -> LatentCodec:
    ck = load_checkpoint(path)
    _check_meta(ck, "codec")
    codec = LatentCodec()
    load_module_arrays(codec, ck.arrays)
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec.eval()


# --------------------------------------------------------------------------- codec pretraining


def pretrain_codec(spec: DatasetSpec, steps: int = 2000, seed: int = 0, batch_size: int = 8,
                   lr: float = 2e-3, progress=None) -> LatentCodec:
    """Fit the autoencoder on HR crops and their bicubic-upsampled LR versions, then freeze it."""
    manifest = build_manifest(spec.directory)
    with _seeded(derive_seed(seed, "init", "codec")):
        codec = LatentCodec()
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(1, steps))
    pspec = dataclasses.replace(spec, seed=derive_seed(spec.seed, "codec"))
    half = batch_size // 2 or 1
    for it in range(steps):
        x_l, x_h = sample_batch(manifest, pspec, it, half)
        x = torch.cat([x_h, upsample_lr(x_l)])[:batch_size]
        rec = codec(x)
        loss = (rec - x).abs().mean() + ((rec - x) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if progress and (it % 100 == 0 or it == steps - 1):
            progress({"codec_step": it, "loss": loss.item()})
    with torch.no_grad():
        x_l, x_h = sample_batch(manifest, pspec, steps, 32)
        z = codec.encode(torch.cat([x_h, upsample_lr(x_l)]))
        codec.scaling_factor.fill_(1.0 / float(z.std()))
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec.eval()


def codec_reconstruction_error(codec: LatentCodec, pairs) -> float:
    with torch.no_grad():
        x = torch.stack([b for _, b in pairs])
        return float((codec(x).clamp(0, 1) - x).abs().mean())


# --------------------------------------------------------------------------- loop


def _prepare_codec(config: TrainConfig, out_dir: Path | None, progress=None) -> LatentCodec:
    if config.codec_checkpoint:
        return load_codec(config.codec_checkpoint)
    cache = out_dir / "codec.ckpt" if out_dir else None
    if cache is not None and cache.exists():
        return load_codec(cache)
    codec = pretrain_codec(config.dataset, config.codec_pretrain_steps, config.seed, progress=progress)
    if cache is not None:
        save_codec(codec, cache, {"steps": config.codec_pretrain_steps, "seed": config.seed})
    return codec


def run_training(config: TrainConfig, out_dir=None, resume=None, progress=None,
                 stop_after: int | None = None) -> TrainState:
    """Train for ``config.iterations`` steps (or until ``stop_after``), with periodic eval/checkpoints.

    Writes ``train_log.jsonl``, ``eval_log.jsonl``, ``config.json`` and
    ``final.ckpt`` into ``out_dir`` when given.
    """
    if config.dataset is None:
        raise ConfigError("dataset", "a dataset specification is required")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.json")
    manifest = build_manifest(config.dataset.directory)
    extractor = build_extractor(config)
    val = heldout_pairs(config)
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        state = state_from_checkpoint(ck, config)
    else:
        state = build_state(config, _prepare_codec(config, out, progress))
    state.dump_dir = out
    workers = num_workers()
    end = config.iterations if stop_after is None else min(config.iterations, stop_after)

    def do_eval():
        ev = evaluate_heldout(state, val, extractor)
        state.evals.append(ev)
        _append(out, "eval_log.jsonl", ev)
        if progress:
            progress({"eval": ev})

    if state.iteration == 0 and not state.evals and config.eval_every:
        do_eval()
    while state.iteration < end:
        batch = sample_batch(manifest, config.dataset, state.iteration, config.batch_size, workers)
        rec = train_step(state, batch, extractor)
        _append(out, "train_log.jsonl", rec)
        if progress:
            progress(rec)
        it = state.iteration
        if config.eval_every and (it % config.eval_every == 0 or it == config.iterations):
            do_eval()
        if out and config.checkpoint_every and it % config.checkpoint_every == 0:
            save_checkpoint(state_to_checkpoint(state), out / f"step_{it:07d}.ckpt")
    if out:
        save_checkpoint(state_to_checkpoint(state), out / "final.ckpt")
    return state


def _append(out: Path | None, name: str, rec: dict):
    if out is None:
        return
    with open(out / name, "a") as fh:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
