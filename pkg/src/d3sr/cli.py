"""Command-line entry point.

Exit codes: 0 success, 1 usage/configuration error, 2 runtime error,
3 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DATA = 0, 1, 2, 3

log = logging.getLogger("d3sr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _progress(rec):
    if "eval" in rec:
        log.info("eval %s", json.dumps(rec["eval"], sort_keys=True))
    elif "codec_step" in rec:
        log.info("codec step %(codec_step)d loss %(loss).5f", rec)
    elif rec.get("iteration", 0) % 50 == 0:
        log.info("step %s", json.dumps({k: round(v, 5) if isinstance(v, float) else v
                                        for k, v in rec.items()}, sort_keys=True))


# --------------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    from .trainer import TrainConfig, run_training

    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    config = TrainConfig.load(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if config.dataset is None:
        raise UsageError("dataset: the config must contain a dataset section")
    out = Path(args.output or Path(args.config).with_suffix("").name + "_run")
    state = run_training(config, out, resume=args.resume, progress=_progress)
    last = state.evals[-1] if state.evals else {}
    print(json.dumps({"output": str(out), "iteration": state.iteration, **last}, sort_keys=True))
    return EXIT_OK


def cmd_infer(args) -> int:
    import torch

    from .dataio import read_png, write_png
    from .networks import upsample_lr
    from .trainer import load_generator

    gen = load_generator(args.checkpoint)
    x_l = read_png(args.input)
    before = gen.denoiser.calls
    with torch.no_grad():
        x_hat, _ = gen(upsample_lr(x_l[None]))
    calls = gen.denoiser.calls - before
    if args.assert_one_step and calls != 1:
        raise RuntimeError(f"denoiser evaluated {calls} times, expected exactly 1")
    write_png(x_hat[0], args.output)
    print(json.dumps({"output": args.output, "shape": list(x_hat.shape[1:]), "denoiser_calls": calls}))
    return EXIT_OK


def cmd_eval(args) -> int:
    import torch

    from .metrics import baseline, evaluate_dataset, load_eval_pairs
    from .networks import upsample_lr
    from .perceptual import FeatureExtractor

    if bool(args.checkpoint) == bool(args.baseline):
        raise UsageError("give exactly one of --checkpoint or --baseline")
    pairs, manifest = load_eval_pairs(args.input)
    if args.baseline == "oracle":
        fn = "oracle"
    elif args.baseline:
        fn = baseline(args.baseline)
    else:
        from .trainer import load_generator

        gen = load_generator(args.checkpoint)

        def fn(x_l):
            with torch.no_grad():
                return gen(upsample_lr(x_l[None]))[0][0]
    ident = args.checkpoint or f"baseline:{args.baseline}"
    report = evaluate_dataset(fn, pairs, FeatureExtractor(seed=args.extractor_seed),
                              dataset=f"{args.input} ({manifest.digest()[:12]})", checkpoint=ident)
    report.write(args.output)
    print(report.summary(), end="")
    return EXIT_OK


def cmd_degrade(args) -> int:
    from .adversarial import derive_seed
    from .dataio import build_manifest, read_png, write_png
    from .degradation import DegradationConfig, apply_degradation, make_recipe

    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        config = DegradationConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        config = DegradationConfig()
    if args.second_order:
        config.second_order = True
    seed = args.seed or 0
    manifest = build_manifest(args.input)
    out = Path(args.output)
    f = config.factor
    recipes = []
    for i, e in enumerate(manifest.entries):
        x_h = read_png(manifest.path(i))
        H, W = (x_h.shape[1] // f) * f, (x_h.shape[2] // f) * f
        x_h = x_h[:, :H, :W]
        recipe = make_recipe(derive_seed(seed, "degrade", e["path"]), config)
        x_l = apply_degradation(x_h, recipe)
        stem = Path(e["path"]).stem
        write_png(x_h, out / "hr" / f"{stem}.png")
        write_png(x_l, out / "lr" / f"{stem}.png")
        (out / "recipes").mkdir(parents=True, exist_ok=True)
        (out / "recipes" / f"{stem}.json").write_text(recipe.to_json() + "\n")
        recipes.append(recipe)
    report = recipe_report(recipes, config)
    (out / "recipe_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"images": len(recipes), "output": str(out), "all_within_range": report["all_within_range"]}))
    return EXIT_OK


def recipe_report(recipes, config) -> dict:
    """Per-parameter summary of sampled values against the configured ranges."""
    import numpy as np

    ranges = {
        ("gaussian_blur", "sigma"): config.blur_sigma,
        ("resize", "scale"): config.resize_scale,
        ("gaussian_noise", "sigma"): config.noise_sigma,
        ("jpeg", "quality"): config.jpeg_quality,
    }
    params, ok_all = {}, True
    for (op, key), (lo, hi) in ranges.items():
        vals = np.array([v for r in recipes for v in r.params(op, key)], dtype=np.float64)
        if not len(vals):
            continue
        counts, edges = np.histogram(vals, bins=10, range=(lo, hi) if hi > lo else None)
        ok = bool(((vals >= lo) & (vals <= hi)).all())
        ok_all &= ok
        params[f"{op}.{key}"] = {
            "count": int(len(vals)), "min": float(vals.min()), "max": float(vals.max()),
            "mean": float(vals.mean()), "range": [lo, hi], "within_range": ok,
            "histogram": counts.tolist(), "bin_edges": edges.tolist(),
        }
    modes = [r.params("resize", "mode") for r in recipes]
    mode_counts = {}
    for m in (m for ms in modes for m in ms):
        mode_counts[m] = mode_counts.get(m, 0) + 1
    return {"params": params, "resize_modes": mode_counts, "all_within_range": ok_all,
            "config": config.to_dict()}


def cmd_plot_features(args) -> int:
    import dataclasses

    from .dataio import DatasetSpec, build_manifest, load_checkpoint, sample_training_pair
    from .features import midblock_features, project_features, render_projection, write_projection
    from .trainer import state_from_checkpoint

    state = state_from_checkpoint(load_checkpoint(args.checkpoint))
    if state.disc is None:
        raise UsageError("checkpoint has no discriminator (discriminator = 'none')")
    cfg = state.config
    base = cfg.dataset or DatasetSpec(root=args.input)
    spec = dataclasses.replace(base, root=args.input, split="val", pairing="on_the_fly", seed=args.seed or 0)
    manifest = build_manifest(spec.directory)
    pairs = [sample_training_pair(manifest, spec, k) for k in range(args.samples)]
    real, fake = midblock_features(state.generator, state.disc, pairs, t=args.timestep, seed=args.seed or 0)
    rows, dist = project_features(real, fake)
    out = Path(args.output)
    write_projection(rows, out.with_suffix(".csv"))
    rendered = render_projection(rows, out.with_suffix(".png"))
    print(json.dumps({"rows": len(rows), "centroid_distance": dist, "plot": rendered,
                      "data": str(out.with_suffix(".csv"))}))
    return EXIT_OK


def cmd_pretrain_codec(args) -> int:
    from .trainer import TrainConfig, pretrain_codec, save_codec

    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    config = TrainConfig.load(args.config)
    if config.dataset is None:
        raise UsageError("dataset: the config must contain a dataset section")
    seed = config.seed if args.seed is None else args.seed
    codec = pretrain_codec(config.dataset, config.codec_pretrain_steps, seed,
                           lr=config.codec_pretrain_lr, progress=_progress)
    save_codec(codec, args.output, {"steps": config.codec_pretrain_steps, "seed": seed})
    print(json.dumps({"output": args.output}))
    return EXIT_OK


def cmd_toy_corpus(args) -> int:
    from .dataio import make_toy_corpus

    make_toy_corpus(args.output, args.train, args.val, args.size, args.seed or 0)
    print(json.dumps({"output": args.output}))
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="d3sr", description="One-step diffusion super-resolution with a diffusion discriminator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="run adversarial training from a JSON config")
    s.add_argument("--config", required=True, help="run configuration (JSON)")
    s.add_argument("--output", help="run directory (default: <config stem>_run)")
    s.add_argument("--seed", type=int, help="override the root seed")
    s.add_argument("--resume", help="training checkpoint to resume from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="x4 super-resolve one PNG with a single denoiser step")
    s.add_argument("--checkpoint", required=True, help="training checkpoint")
    s.add_argument("--input", required=True, help="LR PNG image")
    s.add_argument("--output", required=True, help="output PNG path")
    s.add_argument("--seed", type=int, help="accepted for uniformity; inference is deterministic")
    s.add_argument("--assert-one-step", action="store_true",
                   help="fail unless the denoiser ran exactly once")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="PSNR-Y / SSIM-Y / DISTS report on a folder with lr/ and hr/")
    s.add_argument("--checkpoint", help="training checkpoint")
    s.add_argument("--baseline", choices=("oracle", "bicubic", "nearest"),
                   help="evaluate a reference upscaler instead of a checkpoint")
    s.add_argument("--input", required=True, help="dataset folder containing lr/ and hr/")
    s.add_argument("--output", required=True, help="report CSV path (summary written alongside)")
    s.add_argument("--extractor-seed", type=int, default=0, help="seed of the DISTS feature pyramid")
    s.add_argument("--seed", type=int, help="accepted for uniformity; evaluation is deterministic")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("degrade", help="synthesize LR/HR pairs with per-image recipe sidecars")
    s.add_argument("--input", required=True, help="folder of HR PNGs")
    s.add_argument("--output", required=True, help="output folder (hr/, lr/, recipes/)")
    s.add_argument("--seed", type=int, default=0, help="root seed")
    s.add_argument("--config", help="degradation ranges (JSON)")
    s.add_argument("--second-order", action="store_true", help="apply the degradation chain twice")
    s.set_defaults(func=cmd_degrade)

    s = sub.add_parser("plot-features", help="2-D projection of discriminator middle-block features")
    s.add_argument("--checkpoint", required=True, help="training checkpoint with a discriminator")
    s.add_argument("--input", required=True, help="folder of HR PNGs (or a corpus root with val/)")
    s.add_argument("--output", required=True, help="output path stem (.csv and .png are written)")
    s.add_argument("--seed", type=int, default=0, help="seed for crops, degradations and noise")
    s.add_argument("--samples", type=int, default=32, help="number of image pairs")
    s.add_argument("--timestep", type=int, default=0, help="diffusion timestep for the noised latents")
    s.set_defaults(func=cmd_plot_features)

    s = sub.add_parser("pretrain-codec", help="fit and freeze the latent autoencoder")
    s.add_argument("--config", required=True, help="run configuration (JSON)")
    s.add_argument("--output", required=True, help="codec checkpoint path")
    s.add_argument("--seed", type=int, help="override the root seed")
    s.set_defaults(func=cmd_pretrain_codec)

    s = sub.add_parser("make-toy-corpus", help="write the procedural texture corpus")
    s.add_argument("--output", required=True, help="corpus root (train/ and val/ are created)")
    s.add_argument("--train", type=int, default=48, help="training images")
    s.add_argument("--val", type=int, default=8, help="validation images")
    s.add_argument("--size", type=int, default=96, help="image side length")
    s.add_argument("--seed", type=int, default=0, help="root seed")
    s.set_defaults(func=cmd_toy_corpus)
    return p


def main(argv=None) -> int:
    from .dataio import CheckpointError, DataError
    from .trainer import ConfigError, TrainingDiverged

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"d3sr {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"d3sr {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (CheckpointError, TrainingDiverged, RuntimeError, OSError, ValueError) as e:
        print(f"d3sr {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
