"""Result tables, overlay images and the ablation lattice runner."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import ABLATIONS, TrainConfig
from .data import CLASS_NAMES, Sample, make_split
from .metrics import ClassStats, MetricsReport, aggregate, render_table
from .segnet import SegNet

log = logging.getLogger(__name__)

# RGBA per class: background transparent, MYO green, LV red, RV blue
CLASS_COLORS = np.array(
    [[0, 0, 0, 0], [0.1, 0.8, 0.2, 0.55], [0.9, 0.15, 0.1, 0.55], [0.15, 0.35, 0.95, 0.55]], dtype=np.float32
)

ABLATION_ORDER = ("FUDA", "FUDA+CCL", "FUDA+CCL+CNR", "FUDA+CCL+CNR+MPCCL")


def read_metrics_csv(text: str, label: str = "") -> MetricsReport:
    rows = list(csv.DictReader(io.StringIO(text)))
    per_class = {
        r["class"]: ClassStats(
            float(r["dice_mean"]), float(r["dice_std"]), float(r["hd95_mean"]), float(r["hd95_std"]),
            int(r["undefined_hd95_count"]),
        )
        for r in rows
        if r["class"] != "Avg"
    }
    return MetricsReport(per_class, label=label)


def color_overlay(image: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Grey image [H,W] blended with class colors; returns RGB float [H,W,3]."""
    rgb = np.repeat(np.clip(image, 0, 1)[..., None], 3, axis=2)
    col = CLASS_COLORS[labels]
    a = col[..., 3:4]
    return rgb * (1 - a) + col[..., :3] * a


def save_overlays(model: SegNet, samples: Sequence[Sample], path: str | Path, n: int = 4, title: str = "") -> Path:
    """Rows of (image, prediction overlay, ground-truth overlay) for the first ``n`` samples."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    samples = list(samples)[:n]
    x = torch.from_numpy(np.stack([s.image for s in samples]))
    model.eval()
    with torch.no_grad():
        pred = model(x)["logits"].argmax(1).numpy()
    fig, axes = plt.subplots(len(samples), 3, figsize=(6, 2 * len(samples)), squeeze=False)
    for i, s in enumerate(samples):
        img = s.image[0]
        for ax, pic, name in zip(axes[i], (np.repeat(img[..., None], 3, 2), color_overlay(img, pred[i]), color_overlay(img, s.label)), ("image", "prediction", "ground truth")):
            ax.imshow(pic)
            ax.set_axis_off()
            if i == 0:
                ax.set_title(name, fontsize=8)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=90)
    plt.close(fig)
    return path


@dataclass
class RunRecord:
    experiment: str
    method: str
    seed: int
    fold: int
    target: MetricsReport
    source: MetricsReport | None = None


def summary_rows(records: Sequence[RunRecord]) -> list[tuple[str, str, MetricsReport]]:
    """One aggregated row per (experiment, method), in first-seen order."""
    groups: dict[tuple[str, str], list[MetricsReport]] = {}
    for r in records:
        groups.setdefault((r.experiment, r.method), []).append(r.target)
    return [(e, m, aggregate(reps)) for (e, m), reps in groups.items()]


def records_csv(records: Sequence[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experiment", "method", "seed", "fold", "target_dice", "target_hd95", "source_dice"])
    for r in records:
        w.writerow([
            r.experiment, r.method, r.seed, r.fold, f"{r.target.avg_dice[0]:.6f}", f"{r.target.avg_hd95[0]:.6f}",
            f"{r.source.avg_dice[0]:.6f}" if r.source else "",
        ])
    return buf.getvalue()


def ordering_check(records: Sequence[RunRecord], order: Sequence[str] = ABLATION_ORDER) -> dict[int, list[str]]:
    """Per seed, the list of adjacent steps along ``order`` where mean target Dice decreased."""
    by_seed: dict[int, dict[str, list[float]]] = {}
    for r in records:
        by_seed.setdefault(r.seed, {}).setdefault(r.method, []).append(r.target.avg_dice[0])
    out = {}
    for seed, methods in sorted(by_seed.items()):
        if not all(m in methods for m in order):
            continue
        means = [float(np.mean(methods[m])) for m in order]
        out[seed] = [f"{a} ({x:.4f}) > {b} ({y:.4f})" for a, b, x, y in zip(order, order[1:], means, means[1:]) if y < x]
    return out


def run_ablation(
    base: TrainConfig,
    seeds: Sequence[int],
    variants: Sequence[str] = tuple(ABLATIONS),
    corpus: Sequence[Sample] | None = None,
    out_dir: str | Path | None = None,
    overlays: bool = True,
) -> list[RunRecord]:
    """Train every variant of the ablation lattice for every seed on one fold.

    The style module is pretrained once per seed and shared by the variants.
    """
    from .training import get_corpus, pretrain_style, run_training, style_pool

    corpus = get_corpus(base) if corpus is None else corpus
    records = []
    for seed in seeds:
        cfg_seed = base.replace(seed=seed)
        style = None
        if any(ABLATIONS[v]["use_style"] for v in variants):
            style = pretrain_style(cfg_seed, style_pool(corpus)).module
        for v in variants:
            cfg = cfg_seed.replace(**ABLATIONS[v])
            if out_dir:
                cfg = cfg.replace(out_dir=str(Path(out_dir) / f"seed{seed}" / v))
            res = run_training(cfg, corpus, style)
            log.info("seed %d %s target dice %.4f source dice %.4f (%.0fs)", seed, v, res.target.avg_dice[0], res.source.avg_dice[0], res.seconds)
            records.append(RunRecord(cfg.mode, v, seed, cfg.fold, res.target, res.source))
            if out_dir and overlays:
                from .training import model_from_checkpoint

                split = make_split(corpus, cfg.mode, cfg.fold, cfg.n_folds, cfg.corpus_seed)
                save_overlays(model_from_checkpoint(cfg, res.checkpoint), split.target_test[::5], Path(cfg.out_dir) / "overlay_target.png", title=v)
    if out_dir:
        write_report(records, out_dir)
    return records


def write_report(records: Sequence[RunRecord], out_dir: str | Path) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = summary_rows(records)
    paths = {"runs": out / "runs.csv", "table": out / "table.txt"}
    paths["runs"].write_text(records_csv(records))
    text = render_table(rows)
    order = ordering_check(records)
    if order:
        text += "\n\nablation ordering (decreases per seed):\n"
        text += "\n".join(f"  seed {s}: {'; '.join(v) if v else 'nondecreasing'}" for s, v in order.items())
    paths["table"].write_text(text + "\n")
    for exp, method, rep in rows:
        p = out / f"summary_{exp}_{method.replace('+', '_')}.csv"
        p.write_text(rep.to_csv())
        paths[f"{exp}/{method}"] = p
    return paths


def collect_run_dirs(run_dirs: Sequence[str | Path]) -> list[RunRecord]:
    """Rebuild records from ``train`` output directories (config.txt + target_metrics.csv)."""
    records = []
    for d in run_dirs:
        d = Path(d)
        cfg = TrainConfig.from_file(d / "config.txt")
        tgt = read_metrics_csv((d / "target_metrics.csv").read_text(), "target")
        src = read_metrics_csv((d / "source_metrics.csv").read_text(), "source") if (d / "source_metrics.csv").exists() else None
        records.append(RunRecord(cfg.mode, cfg.variant, cfg.seed, cfg.fold, tgt, src))
    return records


__all__ = [
    "CLASS_NAMES",
    "RunRecord",
    "collect_run_dirs",
    "color_overlay",
    "ordering_check",
    "read_metrics_csv",
    "run_ablation",
    "save_overlays",
    "summary_rows",
    "write_report",
]
