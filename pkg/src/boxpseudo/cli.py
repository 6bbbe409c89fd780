"""Command line entry point: ``boxpseudo <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import evaluation as ev
from .labeler import Labeler, LabelerConfig
from .overlap import ObjectBank, extract_object_bank, extract_overlap_samples, load_sample_dir, save_sample
from .scene import FormatError, ValidationError, load_scene, save_labels
from .simgen import ExhaustionError, PairStats, SimConfig, generate_corpus, harvest_stats
from .synth import WorldConfig, generate_world, overlap_fraction, write_world
from .trainer import (DivergenceError, MetricsLog, TrainConfig, finetune_smt, load_checkpoint, pretrain,
                      save_checkpoint)

log = logging.getLogger("boxpseudo")


def _scenes(directory):
    paths = sorted(Path(directory).glob("*.npz"))
    if not paths:
        raise FileNotFoundError(f"no scene files in {directory}")
    return [load_scene(p) for p in paths]


def _samples(directory):
    samples = load_sample_dir(directory)
    if not samples:
        raise FileNotFoundError(f"no sample files in {directory}")
    return samples


def _write_samples(samples, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        save_sample(s, out / f"{s.scene_id}_{s.box_pair[0]}_{s.box_pair[1]}_{i:05d}.npz")


def cmd_synth(args):
    cfg = WorldConfig.from_file(args.config) if args.config else WorldConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.scenes is not None:
        cfg = replace(cfg, num_scenes=args.scenes)
    scenes = generate_world(cfg)
    write_world(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out} (overlap fraction {overlap_fraction(scenes):.2f})")


def cmd_extract(args):
    samples = [s for sc in _scenes(args.scene_dir) for s in extract_overlap_samples(sc, args.margin)]
    _write_samples(samples, args.out)
    print(f"wrote {len(samples)} overlap samples to {args.out}")


def cmd_bank(args):
    bank = extract_object_bank(_scenes(args.scene_dir))
    bank.save(args.out)
    print(f"wrote {len(bank)} isolated objects to {args.out}")


def cmd_harvest(args):
    stats = harvest_stats(_samples(args.sample_dir))
    stats.save(args.out)
    print(f"wrote statistics for {len(stats)} category pairs to {args.out}")


def cmd_gen_sim(args):
    cfg = SimConfig(gravity=not args.no_gravity, collision=not args.no_collision,
                    background=not args.no_background, rng_seed=args.seed,
                    superpoint_size=args.superpoint_size, floor_point_rate=args.floor_rate)
    samples, manifest = generate_corpus(PairStats.load(args.stats), ObjectBank.load(args.bank), args.count, cfg)
    _write_samples(samples, args.out)
    (Path(args.out) / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {manifest['accepted']} simulated samples ({manifest['rejected_pairs']} pairs rejected)")


def _train_cfg(args, base=None):
    cfg = base or TrainConfig()
    over = {k: v for k, v in {
        "sim_epochs": getattr(args, "epochs", None) if args.command == "pretrain" else None,
        "real_epochs": getattr(args, "epochs", None) if args.command == "finetune" else None,
        "sim_batch": getattr(args, "batch", None) if args.command == "pretrain" else None,
        "real_batch": getattr(args, "batch", None) if args.command == "finetune" else None,
        "lr": args.lr, "seed": args.seed, "ema_decay": getattr(args, "ema", None),
    }.items() if v is not None}
    return replace(cfg, **over)


def _maybe_plot_losses(args, metrics):
    if args.plot:
        path = Path(args.out).with_suffix(".loss.png")
        ev.plot_losses(metrics.records, path)
        print(f"wrote {path}")


def cmd_pretrain(args):
    cfg = _train_cfg(args)
    torch.manual_seed(cfg.seed)
    model = Labeler(LabelerConfig(preset=args.preset, channels=args.channels))
    metrics = MetricsLog(args.metrics)
    res = pretrain(model, _samples(args.sim_dir), cfg, metrics)
    save_checkpoint(args.out, model, cfg, res.optimizer, res.steps, extra={"phase": "pretrain"})
    print(f"pretrained {res.steps} steps, final loss {res.losses[-1]:.4f}; wrote {args.out}")
    _maybe_plot_losses(args, metrics)


def cmd_finetune(args):
    if args.ckpt:
        model, meta = load_checkpoint(args.ckpt)
        base = TrainConfig.from_dict(meta["train"]) if meta.get("train") else TrainConfig()
        lcfg = model.cfg
    elif args.no_ssg_init:
        base, lcfg = TrainConfig(), LabelerConfig()
    else:
        raise SystemExit("finetune: --ckpt is required unless --no-ssg-init is given")
    cfg = _train_cfg(args, base)
    if args.no_ssg_init:
        torch.manual_seed(cfg.seed)
        model = Labeler(lcfg)
    metrics = MetricsLog(args.metrics)
    res = finetune_smt(model, _samples(args.real_dir), cfg, metrics)
    save_checkpoint(args.out, res.model, cfg, res.optimizer, res.steps,
                    extra={"phase": "finetune", "ssg_init": not args.no_ssg_init})
    print(f"fine-tuned {res.steps} steps; wrote teacher to {args.out}")
    _maybe_plot_losses(args, metrics)


METHODS = ("smaller-box", "majority", "saformer")


def cmd_eval(args):
    methods = {}
    for name in args.methods.split(","):
        name = name.strip()
        if name == "smaller-box":
            methods[name] = ev.smaller_box_predictions
        elif name == "majority":
            methods[name] = ev.majority_predictions
        elif name == "saformer":
            if not args.ckpt:
                raise SystemExit("eval: method 'saformer' needs --ckpt")
            methods[name] = ev.labeler_method(load_checkpoint(args.ckpt)[0])
        else:
            raise SystemExit(f"eval: unknown method {name!r}; choose from {', '.join(METHODS)}")
    table = ev.run_benchmark(methods, _samples(args.dataset), binary=args.binary)
    print(table.to_text())
    if args.out:
        table.write(args.out)
        if args.plot:
            ev.plot_macc(table, Path(args.out).with_suffix(".png"))


def cmd_label(args):
    model, _ = load_checkpoint(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scenes = _scenes(args.scene_dir)
    for sc in scenes:
        labels = ev.label_scene(sc, extract_overlap_samples(sc, args.margin), model)
        save_labels(labels, out / f"{sc.scene_id}.labels.npz")
    print(f"wrote pseudo-labels for {len(scenes)} scenes to {out}")


def cmd_benchmark(args):
    from .pipeline import BenchmarkConfig, run_pipeline

    cfg = BenchmarkConfig(seed=args.seed)
    if args.small:
        cfg = cfg.small()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = run_pipeline(cfg, metrics_path=out / "metrics.jsonl")
    res.table.write(out / "benchmark")
    print(res.table.to_text())
    if args.plot:
        ev.plot_losses(res.metrics, out / "loss.png")
        ev.plot_macc(res.table, out / "benchmark.png")


def build_parser():
    p = argparse.ArgumentParser(prog="boxpseudo", description="Soft instance pseudo-labels from 3D boxes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic world of scenes")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--scenes", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", help="write one overlap sample per intersecting box pair")
    s.add_argument("--scene-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--margin", type=float, default=0.1)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("bank", help="collect isolated objects into an object bank")
    s.add_argument("--scene-dir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bank)

    s = sub.add_parser("harvest", help="category-pair distance statistics from overlap samples")
    s.add_argument("--sample-dir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_harvest)

    s = sub.add_parser("gen-sim", help="generate simulated overlap samples")
    s.add_argument("--stats", required=True)
    s.add_argument("--bank", required=True)
    s.add_argument("--count", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--superpoint-size", type=float, default=0.05)
    s.add_argument("--floor-rate", type=float, default=400.0, help="floor points per square metre")
    s.add_argument("--no-gravity", action="store_true")
    s.add_argument("--no-collision", action="store_true")
    s.add_argument("--no-background", action="store_true")
    s.set_defaults(func=cmd_gen_sim)

    for name, func in (("pretrain", cmd_pretrain), ("finetune", cmd_finetune)):
        s = sub.add_parser(name, help=f"{name} the labeler")
        if name == "pretrain":
            s.add_argument("--sim-dir", required=True)
            s.add_argument("--preset", choices=("toy", "paper"), default="toy")
            s.add_argument("--channels", type=int, default=32)
        else:
            s.add_argument("--ckpt")
            s.add_argument("--real-dir", required=True)
            s.add_argument("--no-ssg-init", action="store_true", help="start from fresh parameters")
            s.add_argument("--ema", type=float)
        s.add_argument("--out", required=True)
        s.add_argument("--epochs", type=int)
        s.add_argument("--batch", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--seed", type=int)
        s.add_argument("--metrics", help="line-delimited JSON metrics file")
        s.add_argument("--plot", action="store_true", help="write a loss curve next to --out")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="mAcc table on overlap samples with ground truth")
    s.add_argument("--ckpt")
    s.add_argument("--dataset", required=True, help="directory of overlap sample files")
    s.add_argument("--methods", default="smaller-box,saformer")
    s.add_argument("--binary", action="store_true", help="score only points whose ground truth is A or B")
    s.add_argument("--out", help="path stem for .txt and .json tables")
    s.add_argument("--plot", action="store_true", help="write an mAcc bar chart (needs --out)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("label", help="write soft pseudo-label files for scenes")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene-dir", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--margin", type=float, default=0.1)
    s.set_defaults(func=cmd_label)

    s = sub.add_parser("benchmark", help="run the full synthetic benchmark end to end")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--small", action="store_true", help="reduced sizes for a quick run")
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (FormatError, ValidationError, FileNotFoundError, ExhaustionError, DivergenceError, ValueError) as e:
        print(f"boxpseudo {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
