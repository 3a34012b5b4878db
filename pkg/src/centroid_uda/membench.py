"""Memory profiling of pixel-wise, block-wise and centroid contrastive losses.

The pixel-wise and block-wise losses below exist only as profiling references;
training never uses them.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.profiler import ProfilerActivity, profile

from .centroids import CentroidSet, compute_centroids, partition_centroids, partition_prediction
from .losses import ContrastiveConfig, contrastive_loss, mpccl

log = logging.getLogger(__name__)

VARIANTS = ("pixel", "block", "centroid", "mpccl")


@dataclass
class BenchResult:
    variant: str
    H: int
    W: int
    K: int
    C: int
    param: int  # block side for "block", partitions for "mpccl", 0 otherwise
    peak_bytes: float  # whole loss (forward + backward)
    pairwise_bytes: float  # similarity stage only
    wall_time: float
    loss: float
    censored: bool = False


def measure_peak(fn: Callable[[], object]) -> tuple[int, object]:
    """Peak of live CPU bytes allocated while ``fn`` runs, from the profiler's allocation events."""
    with profile(activities=[ProfilerActivity.CPU], profile_memory=True) as prof:
        out = fn()
    events = sorted(prof.events(), key=lambda e: e.time_range.start)
    live = peak = 0
    for e in events:
        live += e.self_cpu_memory_usage
        peak = max(peak, live)
    return peak, out


# ---------------------------------------------------------------------------
# reference losses


def pixel_contrastive(emb: torch.Tensor, labels: torch.Tensor, tau: float = 0.1) -> torch.Tensor:
    """Supervised pixel-to-pixel contrastive loss over all N pixels; builds an N×N similarity matrix.

    ``emb`` [N, C] (unit rows), ``labels`` [N].
    """
    n = emb.shape[0]
    sim = emb @ emb.t() / tau
    self_mask = torch.eye(n, dtype=torch.bool)
    sim = sim.masked_fill(self_mask, float("-inf"))
    pos = (labels[:, None] == labels[None, :]) & ~self_mask
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)
    npos = pos.sum(1).clamp_min(1)
    return -(log_prob.masked_fill(~pos, 0.0).sum(1) / npos).mean()


def block_contrastive(emb: torch.Tensor, labels: torch.Tensor, h: int, w: int, block: int = 8, tau: float = 0.1):
    """Pixel-wise contrast restricted to non-overlapping ``block``×``block`` tiles."""
    c = emb.shape[1]
    e = emb.view(h // block, block, w // block, block, c).permute(0, 2, 1, 3, 4).reshape(-1, block * block, c)
    lab = labels.view(h // block, block, w // block, block).permute(0, 2, 1, 3).reshape(-1, block * block)
    sim = e @ e.transpose(1, 2) / tau
    eye = torch.eye(block * block, dtype=torch.bool)
    sim = sim.masked_fill(eye, float("-inf"))
    pos = (lab[:, :, None] == lab[:, None, :]) & ~eye
    log_prob = sim - torch.logsumexp(sim, dim=2, keepdim=True)
    npos = pos.sum(2).clamp_min(1)
    return -(log_prob.masked_fill(~pos, 0.0).sum(2) / npos).mean()


# ---------------------------------------------------------------------------
# one sweep point


def _inputs(h: int, w: int, k: int, c: int, seed: int):
    g = torch.Generator().manual_seed(seed)
    feats = torch.randn(1, c, h, w, generator=g, dtype=torch.float32)
    labels = torch.randint(k, (1, h, w), generator=g)
    # soft target prediction, as the centroid losses see it in training
    soft = torch.softmax(2.0 * torch.randn(1, k, h, w, generator=g), dim=1)
    # the source side is a fixed set of unit centroids
    src = F.normalize(torch.randn(k, c, generator=g), dim=1)
    return feats, labels, soft, src


def bench_point(variant: str, h: int, w: int, k: int = 4, c: int = 32, param: int = 0, seed: int = 0,
                tau: float = 0.1, max_pairwise_bytes: float = 2e9) -> BenchResult:
    """Profile one loss variant at one spatial size.

    Points whose N×N similarity matrix would exceed ``max_pairwise_bytes`` (or that
    raise an out-of-memory error) are returned as censored.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    n = h * w
    feats, labels, mask, src_vals = _inputs(h, w, k, c, seed)
    cs = CentroidSet(src_vals, torch.ones(k))
    ccfg = ContrastiveConfig(tau=tau, num_partitions=max(param, 1))
    quadratic = variant == "pixel" or (variant == "mpccl" and param * 1.0 >= n / 4)
    if quadratic and 4.0 * n * n * (k if variant == "mpccl" else 1) > max_pairwise_bytes:
        return BenchResult(variant, h, w, k, c, param, math.nan, math.nan, 0.0, math.nan, censored=True)

    def forward(f):
        if variant == "pixel":
            emb = F.normalize(f[0].reshape(c, n).t(), dim=1)
            return pixel_contrastive(emb, labels.reshape(n), tau)
        if variant == "block":
            emb = F.normalize(f[0].reshape(c, n).t(), dim=1)
            return block_contrastive(emb, labels.reshape(n), h, w, param or 8, tau)
        if variant == "centroid":
            return contrastive_loss(compute_centroids(f, mask), cs, ccfg)
        parts, _ = partition_prediction(mask, param, seed)
        ct = compute_centroids(f, mask)
        return mpccl(cs, partition_centroids(f, parts), ct, ccfg)

    def full():
        f = feats.clone().requires_grad_(True)
        loss = forward(f)
        loss.backward()
        return float(loss.detach())

    def pairwise():
        # similarity stage alone, given embeddings or centroids already computed
        if variant == "pixel":
            return float(pixel_contrastive(emb_pre, labels.reshape(n), tau))
        if variant == "block":
            return float(block_contrastive(emb_pre, labels.reshape(n), h, w, param or 8, tau))
        if variant == "centroid":
            return float(contrastive_loss(ct_pre, cs, ccfg))
        return float(sum(contrastive_loss(p, cs, ccfg) for p in parts_pre) / len(parts_pre))

    try:
        with torch.no_grad():
            emb_pre = F.normalize(feats[0].reshape(c, n).t(), dim=1)
            ct_pre = compute_centroids(feats, mask)
            parts_pre = partition_centroids(feats, partition_prediction(mask, param, seed)[0]) if variant == "mpccl" else []
        t0 = time.perf_counter()
        peak, loss = measure_peak(full)
        wall = time.perf_counter() - t0
        with torch.no_grad():
            pair_peak, _ = measure_peak(pairwise)
    except (RuntimeError, MemoryError) as err:  # out of memory: keep sweeping
        log.warning("censored %s at %dx%d: %s", variant, h, w, err)
        return BenchResult(variant, h, w, k, c, param, math.nan, math.nan, 0.0, math.nan, censored=True)
    return BenchResult(variant, h, w, k, c, param, float(peak), float(pair_peak), wall, loss)


# ---------------------------------------------------------------------------
# sweep, fit, output


def run_sweep(sizes: Sequence[int] = (8, 16, 24, 32, 48, 64), variants: Sequence[str] = VARIANTS,
              k: int = 4, c: int = 32, partitions: int = 4, block: int = 8, seed: int = 0,
              max_pairwise_bytes: float = 2e9) -> list[BenchResult]:
    out = []
    for v in variants:
        for s in sizes:
            param = {"block": block, "mpccl": partitions}.get(v, 0)
            if v == "block" and s % block:
                continue
            r = bench_point(v, s, s, k, c, param, seed, max_pairwise_bytes=max_pairwise_bytes)
            log.info("%s %dx%d peak=%.3g pairwise=%.3g", v, s, s, r.peak_bytes, r.pairwise_bytes)
            out.append(r)
    return out


def fit_slope(results: Sequence[BenchResult], field: str = "pairwise_bytes") -> float:
    """Least-squares slope of log(bytes) against log(H·W) over uncensored points."""
    pts = [(r.H * r.W, getattr(r, field)) for r in results if not r.censored and getattr(r, field) > 0]
    if len(pts) < 2:
        return math.nan
    x, y = np.log([p[0] for p in pts]), np.log([p[1] for p in pts])
    if np.ptp(y) == 0:
        return 0.0
    return float(np.polyfit(x, y, 1)[0])


def slopes(results: Sequence[BenchResult]) -> dict[str, dict[str, float]]:
    by = {}
    for r in results:
        by.setdefault(r.variant, []).append(r)
    return {v: {"peak": fit_slope(rs, "peak_bytes"), "pairwise": fit_slope(rs, "pairwise_bytes")} for v, rs in by.items()}


def to_csv(results: Sequence[BenchResult]) -> str:
    buf = io.StringIO()
    names = list(BenchResult.__dataclass_fields__)
    wr = csv.DictWriter(buf, names, lineterminator="\n")
    wr.writeheader()
    for r in results:
        wr.writerow(asdict(r))
    return buf.getvalue()


def plot(results: Sequence[BenchResult], path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    fits = slopes(results)
    for ax, field in zip(axes, ("peak_bytes", "pairwise_bytes")):
        for v in dict.fromkeys(r.variant for r in results):
            rs = [r for r in results if r.variant == v and not r.censored]
            if rs:
                s = fits[v]["peak" if field == "peak_bytes" else "pairwise"]
                ax.loglog([r.H * r.W for r in rs], [max(getattr(r, field), 1) for r in rs], "o-", label=f"{v} (slope {s:.2f})")
            cens = [r for r in results if r.variant == v and r.censored]
            for r in cens:
                ax.axvline(r.H * r.W, color="grey", ls=":", lw=0.8)
        ax.set_xlabel("H·W")
        ax.set_ylabel("bytes")
        ax.set_title(field.replace("_", " "))
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
