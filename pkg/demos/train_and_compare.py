"""Train the no-UDA baseline and full ConFUDA on one fold and compare target Dice.

About five minutes on one core with the default budget. --quick only exercises the
pipeline; its Dice values are not meaningful.
Run: python demos/train_and_compare.py [--quick] [--out runs/demo]
"""
import argparse
from pathlib import Path

from centroid_uda.config import ABLATIONS, TrainConfig
from centroid_uda.data import make_split
from centroid_uda.reporting import save_overlays
from centroid_uda.training import get_corpus, model_from_checkpoint, pretrain_style, run_training, style_pool

ap = argparse.ArgumentParser()
ap.add_argument("--quick", action="store_true")
ap.add_argument("--out", default="runs/demo")
args = ap.parse_args()

cfg = TrainConfig(log_every=0)
if args.quick:
    cfg = cfg.replace(corpus_subjects=5, warmup_epochs=3, main_epochs=3, style_ae_steps=40, style_rain_steps=60)
corpus = get_corpus(cfg)
style = pretrain_style(cfg, style_pool(corpus)).module
split = make_split(corpus, cfg.mode, cfg.fold, cfg.n_folds, cfg.corpus_seed)

for name in ("no-uda", "FUDA+CCL+CNR+MPCCL"):
    run_cfg = cfg.replace(**ABLATIONS[name], out_dir=str(Path(args.out) / name))
    res = run_training(run_cfg, corpus, style)
    print(f"{name:20s} source dice {res.source.avg_dice[0]:.3f}  target dice {res.target.avg_dice[0]:.3f}  ({res.seconds:.0f}s)")
    save_overlays(model_from_checkpoint(run_cfg, res.checkpoint), split.target_test[::5], Path(run_cfg.out_dir) / "overlay.png", title=name)
