"""Per-structure Dice / HD95 and fold-wise aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .data import CLASS_NAMES

_CROSS = ndimage.generate_binary_structure(2, 1)


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    a, b = np.asarray(pred_mask, bool), np.asarray(gt_mask, bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    sa, sb = a.sum(), b.sum()
    if sa + sb == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / (sa + sb))


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` removed by one 4-connected erosion (image border counts as outside)."""
    mask = np.asarray(mask, bool)
    return mask & ~ndimage.binary_erosion(mask, _CROSS, border_value=0)


def surface_distances(pred_mask: np.ndarray, gt_mask: np.ndarray) -> np.ndarray:
    """Symmetric set of boundary-to-boundary nearest distances (pixels)."""
    ba, bb = boundary(pred_mask), boundary(gt_mask)
    da = ndimage.distance_transform_edt(~bb)[ba]
    db = ndimage.distance_transform_edt(~ba)[bb]
    return np.concatenate([da, db])


def hd95(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """95th percentile of the symmetric surface distances.

    Returns 0.0 when both masks are empty and NaN (undefined) when exactly one is.
    """
    a, b = np.asarray(pred_mask, bool), np.asarray(gt_mask, bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    ea, eb = not a.any(), not b.any()
    if ea and eb:
        return 0.0
    if ea or eb:
        return float("nan")
    return float(np.percentile(surface_distances(a, b), 95))


@dataclass
class ClassStats:
    dice_mean: float
    dice_std: float
    hd95_mean: float
    hd95_std: float
    undefined_hd95_count: int = 0


@dataclass
class MetricsReport:
    per_class: dict[str, ClassStats]
    n_cases: int = 0
    label: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def avg_dice(self) -> tuple[float, float]:
        v = list(self.per_class.values())
        return float(np.mean([c.dice_mean for c in v])), float(np.mean([c.dice_std for c in v]))

    @property
    def avg_hd95(self) -> tuple[float, float]:
        v = [c for c in self.per_class.values() if np.isfinite(c.hd95_mean)]
        if not v:
            return float("nan"), float("nan")
        return float(np.mean([c.hd95_mean for c in v])), float(np.mean([c.hd95_std for c in v]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "dice_mean", "dice_std", "hd95_mean", "hd95_std", "undefined_hd95_count"])
        for name, c in self.per_class.items():
            w.writerow([name, f"{c.dice_mean:.6f}", f"{c.dice_std:.6f}", f"{c.hd95_mean:.6f}", f"{c.hd95_std:.6f}", c.undefined_hd95_count])
        (dm, ds), (hm, hs) = self.avg_dice, self.avg_hd95
        total_undef = sum(c.undefined_hd95_count for c in self.per_class.values())
        w.writerow(["Avg", f"{dm:.6f}", f"{ds:.6f}", f"{hm:.6f}", f"{hs:.6f}", total_undef])
        return buf.getvalue()


def evaluate_masks(
    pred: np.ndarray, gt: np.ndarray, class_names: Sequence[str] = CLASS_NAMES, label: str = ""
) -> MetricsReport:
    """Slice-wise metrics for hard label maps ``pred``/``gt`` of shape [N,H,W]; class 0 is background."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    per_class = {}
    for k in range(1, len(class_names)):
        d = np.array([dice(p == k, g == k) for p, g in zip(pred, gt)])
        h = np.array([hd95(p == k, g == k) for p, g in zip(pred, gt)])
        ok = np.isfinite(h)
        per_class[class_names[k]] = ClassStats(
            float(d.mean()),
            float(d.std()),
            float(h[ok].mean()) if ok.any() else float("nan"),
            float(h[ok].std()) if ok.any() else float("nan"),
            int((~ok).sum()),
        )
    return MetricsReport(per_class, len(pred), label)


def aggregate(fold_reports: Sequence[MetricsReport], label: str = "") -> MetricsReport:
    """Mean of the per-fold means and mean of the per-fold stds, per class."""
    if not fold_reports:
        raise ValueError("need at least one fold report")
    names = list(fold_reports[0].per_class)
    per_class = {}
    for n in names:
        cs = [r.per_class[n] for r in fold_reports]
        per_class[n] = ClassStats(
            float(np.mean([c.dice_mean for c in cs])),
            float(np.mean([c.dice_std for c in cs])),
            float(np.nanmean([c.hd95_mean for c in cs])) if any(np.isfinite(c.hd95_mean) for c in cs) else float("nan"),
            float(np.nanmean([c.hd95_std for c in cs])) if any(np.isfinite(c.hd95_std) for c in cs) else float("nan"),
            sum(c.undefined_hd95_count for c in cs),
        )
    return MetricsReport(per_class, sum(r.n_cases for r in fold_reports), label or fold_reports[0].label)


def render_table(rows: Sequence[tuple[str, str, MetricsReport]]) -> str:
    """Plain-text table with one row per (experiment, method, report)."""
    names = list(rows[0][2].per_class) if rows else []
    head = ["Exp.", "Method", *names, "Avg. Dice", *names, "Avg. HD95"]
    body = []
    for exp, method, r in rows:
        cells = [exp, method]
        cells += [f"{r.per_class[n].dice_mean:.2f}±{r.per_class[n].dice_std:.2f}" for n in names]
        cells.append("{:.2f}±{:.2f}".format(*r.avg_dice))
        cells += [f"{r.per_class[n].hd95_mean:.1f}±{r.per_class[n].hd95_std:.1f}" for n in names]
        cells.append("{:.1f}±{:.1f}".format(*r.avg_hd95))
        body.append(cells)
    widths = [max(len(str(x)) for x in col) for col in zip(head, *body)]
    fmt = " | ".join("{:<%d}" % w for w in widths)
    lines = [fmt.format(*head), "-+-".join("-" * w for w in widths)]
    lines += [fmt.format(*b) for b in body]
    return "\n".join(lines)
