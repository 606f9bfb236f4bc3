"""Command-line entry points: train, eval, preview, make-toy.

Exit codes: 0 on success, 2 for configuration problems (bad keys, values,
or files), 3 for runtime failures (diverged training, I/O errors).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, ExperimentConfig, apply_flat, config_hash,
                     parse_config_text, parse_value, to_flat)
from .data import Modality, load_domain, load_manifest, save_domain, split_source
from .evaluation import evaluate_cross_domain
from .seeding import substream, torch_generator
from .synthesizer import random_init, sample_style, synthesize
from .toy import TEXTURE_FAMILIES, TOY_LABEL_NAMES, TOY_NUM_CLASSES, make_toy_dataset
from .trainer import TrainingDiverged, load_checkpoint, run_training, select_checkpoint

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _num_workers() -> int:
    raw = os.environ.get("ADVSDG_NUM_WORKERS", "0")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError("ADVSDG_NUM_WORKERS", f"expected an integer, got {raw!r}")
    if value < 0:
        raise ConfigError("ADVSDG_NUM_WORKERS", "must be >= 0")
    return value


def _load_experiment(args) -> ExperimentConfig:
    exp = ExperimentConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError("config", f"no such file: {path}")
        apply_flat(exp, parse_config_text(path.read_text()))
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, _, value = item.partition("=")
        overrides[key.strip()] = parse_value(value)
    if overrides:
        apply_flat(exp, overrides)
    # explicit flags beat config file and --set
    if getattr(args, "mode", None):
        apply_flat(exp, {"trainer.mode": args.mode})
    if getattr(args, "seed", None) is not None:
        apply_flat(exp, {"trainer.seed": args.seed})
    if getattr(args, "data_root", None):
        exp.data.root = args.data_root
    return exp


def _require_data_root(exp: ExperimentConfig) -> Path:
    if not exp.data.root:
        raise ConfigError("data.root", "set it in the config or pass --data-root")
    root = Path(exp.data.root)
    if not root.exists():
        raise ConfigError("data.root", f"no such directory: {root}")
    return root


def cmd_train(args) -> int:
    exp = _load_experiment(args)
    root = _require_data_root(exp)
    workers = _num_workers()
    source = load_domain(root, exp.data.source)
    split = split_source(source, ratio=exp.data.split_ratio, seed=exp.trainer.seed)
    out = Path(args.out)
    started = time.time()
    checkpoints = run_training(exp.trainer, split, out_dir=out)
    best = select_checkpoint(checkpoints)
    finished = time.time()
    manifest = {
        "command": "train",
        "package_version": __version__,
        "config": to_flat(exp),
        "config_hash": config_hash(exp),
        "out_dir": str(out),
        "mode": exp.trainer.mode,
        "seed": exp.trainer.seed,
        "num_workers": workers,
        "train_samples": len(split.train),
        "val_samples": len(split.val),
        "best_checkpoint": str(best.path) if best.path else None,
        "best_val_dice": best.val_dice,
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(finished)),
        "elapsed_seconds": round(finished - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"best checkpoint: step {best.step}, val dice {best.val_dice:.4f}")
    if best.path:
        print(f"saved to {best.path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    exp = _load_experiment(args)
    root = _require_data_root(exp)
    manifest = load_manifest(root)
    tags = args.domains.split(",") if args.domains else [
        t for t in manifest["domains"] if t != exp.data.source]
    for tag in tags:
        if tag not in manifest["domains"]:
            raise ConfigError("domains", f"{tag!r} not in dataset "
                                         f"(has {sorted(manifest['domains'])})")
    domains = {tag: load_domain(root, tag) for tag in tags}
    table = evaluate_cross_domain(args.checkpoint, domains,
                                  batch_size=args.batch_size,
                                  label_names=manifest.get("label_names"))
    print(table.format(), end="")
    if args.out:
        Path(args.out).write_text(table.as_tsv())
    return EXIT_OK


def _to_uint8(panel: np.ndarray) -> np.ndarray:
    lo, hi = float(panel.min()), float(panel.max())
    scaled = (panel - lo) / (hi - lo) if hi > lo else np.zeros_like(panel)
    return (scaled * 255).round().astype(np.uint8)


def cmd_preview(args) -> int:
    import torch
    from PIL import Image

    exp = _load_experiment(args)
    root = _require_data_root(exp)
    samples = load_domain(root, exp.data.source)
    if not samples:
        raise ConfigError("data.source", "source domain is empty")
    out = Path(args.out)
    if out.suffix.lower() != ".png":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "preview.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    seed = exp.trainer.seed
    rng = substream(seed, "preview")
    gen = torch_generator(substream(seed, "preview", "torch"))

    trained = None
    if args.checkpoint:
        loaded = load_checkpoint(args.checkpoint)
        trained = (loaded.synth_a, loaded.synth_b)

    count = min(args.rows, len(samples))
    picks = rng.choice(len(samples), size=count, replace=False)
    grid_rows = []
    for i in picks:
        image = samples[int(i)].image
        t = torch.from_numpy(image).float().reshape(1, 1, *image.shape)
        panels = [image]
        for col in range(args.draws):
            if trained is not None:
                synth = trained[col % 2]
            else:
                synth = random_init(gen, in_channels=1,
                                    hidden_channels=exp.trainer.model.synth_hidden_channels,
                                    num_blocks=exp.trainer.model.synth_num_blocks)
            z = sample_style(gen, synth.channel_counts)
            alpha = args.alpha if args.alpha is not None else float(rng.uniform())
            with torch.no_grad():
                view = synthesize(t, z, alpha, synth)
            panels.append(view.numpy()[0, 0])
        grid_rows.append(np.concatenate(panels, axis=1))
    Image.fromarray(_to_uint8(np.concatenate(grid_rows, axis=0))).save(out)
    print(f"wrote a {count}x{1 + args.draws} preview grid to {out}")

    if args.heatmaps:
        _write_similarity_heatmaps(out.parent, samples, picks, exp, seed, args.heatmaps)
    return EXIT_OK


def _write_similarity_heatmaps(out_dir: Path, samples, picks, exp, seed: int,
                               num_patches: int) -> None:
    """For each previewed image: rows of per-patch similarity maps between a
    synthesized view's patch embedding and every source feature cell."""
    import torch
    from PIL import Image

    from .mi import PatchFeatureExtractor, extract_patch_features, sample_patch_locations
    from .torchutil import init_parameters_

    m = exp.trainer.model
    gen = torch_generator(substream(seed, "preview", "heatmap"))
    rng = substream(seed, "preview", "heatmap-locs")
    net = PatchFeatureExtractor(1, m.mi_base_width, m.mi_embed_dim)
    init_parameters_(net, gen, leaky_slope=0.2)
    for i in picks:
        image = samples[int(i)].image
        t = torch.from_numpy(image).float().reshape(1, 1, *image.shape)
        synth = random_init(gen, in_channels=1, hidden_channels=m.synth_hidden_channels,
                            num_blocks=m.synth_num_blocks)
        z = sample_style(gen, synth.channel_counts)
        with torch.no_grad():
            view = synthesize(t, z, 1.0, synth)
            h, w = net.feature_hw(t.shape[2], t.shape[3])
            all_cells = np.stack(np.meshgrid(np.arange(h), np.arange(w),
                                             indexing="ij"), axis=-1).reshape(-1, 2)
            f_src = extract_patch_features(t, all_cells, net)[0]  # [h*w, D]
            loc = sample_patch_locations((h, w), min(num_patches, h * w), rng)
            f_syn = extract_patch_features(view, loc, net)[0]  # [P, D]
            sim = (f_syn @ f_src.T).reshape(-1, h, w).numpy()
        panels = [np.kron(_to_uint8(s) / 255.0, np.ones((8, 8))) for s in sim]
        strip = _to_uint8(np.concatenate(panels, axis=1))
        Image.fromarray(strip).save(out_dir / f"heatmap_{int(i):03d}.png")


def cmd_make_toy(args) -> int:
    families = args.families.split(",") if args.families else list(TEXTURE_FAMILIES)
    for fam in families:
        if fam not in TEXTURE_FAMILIES:
            raise ConfigError("families", f"{fam!r} not one of {list(TEXTURE_FAMILIES)}")
    out = Path(args.out)
    for fam in families:
        samples = make_toy_dataset(args.n, fam, seed=args.seed, image_size=args.size)
        save_domain(out, fam, samples, num_classes=TOY_NUM_CLASSES,
                    label_names=list(TOY_LABEL_NAMES), modality=Modality.OTHER,
                    intensity_range=(0.0, 1.0))
    print(f"wrote {len(families)} domains x {args.n} samples to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advsdg",
        description="Train and evaluate single-source domain-generalized segmenters.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_mode=True):
        p.add_argument("--config", help="config file of section.key = value lines")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--data-root", help="dataset directory (overrides data.root)")
        p.add_argument("--seed", type=int, help="overrides trainer.seed")
        if with_mode:
            p.add_argument("--mode", help="overrides trainer.mode")

    p_train = sub.add_parser("train", help="train one run and checkpoint the best")
    common(p_train)
    p_train.add_argument("--out", required=True, help="run directory")
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on held-out domains")
    common(p_eval, with_mode=False)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--domains", help="comma-separated tags (default: all non-source)")
    p_eval.add_argument("--batch-size", type=int, default=16)
    p_eval.add_argument("--out", help="also write the TSV here")
    p_eval.set_defaults(fn=cmd_eval)

    p_prev = sub.add_parser("preview", help="render a grid of synthesized views")
    common(p_prev, with_mode=False)
    p_prev.add_argument("--out", required=True, help="output PNG (or directory)")
    p_prev.add_argument("--rows", type=int, default=4, help="source images to preview")
    p_prev.add_argument("--draws", type=int, default=3, help="synthesized views per image")
    p_prev.add_argument("--alpha", type=float, default=None,
                        help="fixed mix ratio (default: random per view)")
    p_prev.add_argument("--checkpoint", help="use trained synthesizers from this checkpoint")
    p_prev.add_argument("--heatmaps", type=int, default=0, metavar="P",
                        help="also dump P per-patch similarity heatmaps per image")
    p_prev.set_defaults(fn=cmd_preview)

    p_toy = sub.add_parser("make-toy", help="generate the textured-shapes dataset")
    p_toy.add_argument("--out", required=True)
    p_toy.add_argument("--n", type=int, default=200, help="samples per texture family")
    p_toy.add_argument("--families", help="comma-separated subset (default: all)")
    p_toy.add_argument("--seed", type=int, default=0)
    p_toy.add_argument("--size", type=int, default=96)
    p_toy.set_defaults(fn=cmd_make_toy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
