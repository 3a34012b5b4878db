"""Command line entry point: ``centroid-uda <subcommand>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ABLATIONS, PROFILES, TrainConfig, parse_kv, profile

log = logging.getLogger("centroid_uda")


def _config(args) -> TrainConfig:
    cfg = profile(args.profile)
    if args.config:
        cfg = TrainConfig.from_file(args.config, cfg)
    cfg = cfg.with_env()
    if args.set:
        cfg = TrainConfig.from_dict(parse_kv("\n".join(args.set)), cfg)
    return cfg


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", default="desk", choices=sorted(PROFILES))
    p.add_argument("--config", help="flat key = value file with TrainConfig fields")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config field")


def cmd_gen_data(args) -> int:
    from .data import generate_corpus, save_corpus

    corpus = generate_corpus(args.subjects, args.seed)
    save_corpus(corpus, args.out, args.seed, args.subjects)
    print(f"wrote {len(corpus)} slices to {args.out}")
    return 0


def cmd_pretrain_style(args) -> int:
    from .checkpoint import save_module
    from .training import get_corpus, pretrain_style, style_pool

    cfg = _config(args)
    res = pretrain_style(cfg, style_pool(get_corpus(cfg)))
    save_module(args.out, res.module, {
        "seed": str(cfg.seed),
        "rain_first": f"{res.rain_history[0]:.6f}",
        "rain_last": f"{res.rain_history[-1]:.6f}",
    })
    print(f"style loss {res.rain_history[0]:.3f} -> {res.rain_history[-1]:.3f}; saved to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .checkpoint import Checkpoint
    from .training import run_training

    cfg = _config(args)
    if args.out:
        cfg = cfg.replace(out_dir=args.out)
    if args.style:
        cfg = cfg.replace(style_checkpoint=args.style)
    resume = Checkpoint.load(args.resume) if args.resume else None
    res = run_training(cfg, resume=resume, stop_at=args.stop_at)
    print(res.target.to_csv(), end="")
    print(f"target avg dice {res.target.avg_dice[0]:.4f}  source avg dice {res.source.avg_dice[0]:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    from .checkpoint import Checkpoint
    from .training import evaluate

    run = Path(args.run)
    cfg = TrainConfig.from_file(run / "config.txt")
    reports = evaluate(cfg, Checkpoint.load(run / "checkpoint"), args.fold)
    for name, rep in reports.items():
        print(f"# {name}")
        print(rep.to_csv(), end="")
    return 0


def cmd_ablate(args) -> int:
    from .reporting import ordering_check, run_ablation

    cfg = _config(args)
    variants = args.variants or list(ABLATIONS)
    records = run_ablation(cfg, args.seeds, variants, out_dir=args.out)
    print((Path(args.out) / "table.txt").read_text())
    bad = sum(1 for v in ordering_check(records).values() if v)
    print(f"seeds with an ordering violation: {bad}")
    return 0


def cmd_bench_mem(args) -> int:
    from . import membench

    results = membench.run_sweep(args.sizes, args.variants, partitions=args.partitions, block=args.block,
                                 max_pairwise_bytes=args.max_bytes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "membench.csv").write_text(membench.to_csv(results))
    membench.plot(results, out / "membench.png")
    for v, s in membench.slopes(results).items():
        print(f"{v:10s} peak slope {s['peak']:.3f}  pairwise slope {s['pairwise']:.3f}")
    return 0


def cmd_report(args) -> int:
    from .checkpoint import Checkpoint
    from .data import make_split
    from .reporting import collect_run_dirs, save_overlays, write_report
    from .training import get_corpus, model_from_checkpoint

    records = collect_run_dirs(args.runs)
    paths = write_report(records, args.out)
    for run in args.runs:
        run = Path(run)
        if not (run / "checkpoint" / "manifest.txt").exists():
            continue
        cfg = TrainConfig.from_file(run / "config.txt")
        split = make_split(get_corpus(cfg), cfg.mode, cfg.fold, cfg.n_folds, cfg.corpus_seed)
        model = model_from_checkpoint(cfg, Checkpoint.load(run / "checkpoint"))
        save_overlays(model, split.target_test[::5], Path(args.out) / f"overlay_{run.name}.png", title=cfg.variant)
    print(paths["table"].read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="centroid-uda", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic three-domain corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain-style", help="pretrain the style module on source and auxiliary images")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_style)

    p = sub.add_parser("train", help="warm-up plus main phase on one fold")
    _add_config_args(p)
    p.add_argument("--out")
    p.add_argument("--style", help="style checkpoint directory from pretrain-style")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--stop-at", type=int, help="stop after this many optimizer steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="re-evaluate a trained run")
    p.add_argument("run", help="output directory of `train`")
    p.add_argument("--fold", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train the ablation lattice over several seeds")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench-mem", help="memory scaling sweep of contrastive losses")
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", type=int, nargs="+", default=[8, 16, 24, 32, 48, 64])
    p.add_argument("--variants", nargs="+", default=["pixel", "block", "centroid", "mpccl"])
    p.add_argument("--partitions", type=int, default=4)
    p.add_argument("--block", type=int, default=8)
    p.add_argument("--max-bytes", type=float, default=2e9, help="censor points whose N×N matrix exceeds this")
    p.set_defaults(func=cmd_bench_mem)

    p = sub.add_parser("report", help="tables and overlays from finished runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
