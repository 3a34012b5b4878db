import math

import numpy as np
import pytest
import torch

from centroid_uda import membench as M
from centroid_uda.centroids import CentroidSet, compute_centroids
from centroid_uda.losses import ContrastiveConfig, contrastive_loss


def test_measure_peak_sees_allocations():
    peak, _ = M.measure_peak(lambda: torch.zeros(1_000_000).sum())
    assert peak >= 4_000_000


def test_all_variants_finite_on_same_input():
    for v, p in [("pixel", 0), ("block", 8), ("centroid", 0), ("mpccl", 4)]:
        r = M.bench_point(v, 16, 16, param=p)
        assert not r.censored and math.isfinite(r.loss) and r.peak_bytes > 0


def test_centroid_variant_shares_loss_code():
    r = M.bench_point("centroid", 16, 16, seed=3)
    feats, _, soft, src = M._inputs(16, 16, 4, 32, 3)
    want = contrastive_loss(compute_centroids(feats, soft), CentroidSet(src, torch.ones(4)), ContrastiveConfig())
    assert r.loss == want.item()


def test_pixel_loss_reference():
    emb = torch.nn.functional.normalize(torch.randn(6, 3, dtype=torch.float64), dim=1)
    lab = torch.tensor([0, 0, 1, 1, 2, 2])
    got = M.pixel_contrastive(emb, lab, 0.5).item()
    want = []
    e = emb.numpy()
    for i in range(6):
        others = [j for j in range(6) if j != i]
        den = sum(np.exp(e[i] @ e[j] / 0.5) for j in others)
        pos = [j for j in others if lab[j] == lab[i]]
        want.append(-np.mean([np.log(np.exp(e[i] @ e[j] / 0.5) / den) for j in pos]))
    assert got == pytest.approx(np.mean(want), rel=1e-10)


def test_censoring_and_sweep_continues():
    rs = M.run_sweep(sizes=(8, 32), variants=("pixel", "centroid"), max_pairwise_bytes=1e5)
    pix = [r for r in rs if r.variant == "pixel"]
    assert not pix[0].censored and pix[1].censored
    assert all(not r.censored for r in rs if r.variant == "centroid")


def test_slopes_and_outputs(tmp_path):
    rs = M.run_sweep(sizes=(8, 16, 24, 32), variants=("pixel", "centroid"))
    s = M.slopes(rs)
    assert s["pixel"]["pairwise"] >= 1.8
    assert abs(s["centroid"]["pairwise"]) <= 0.1
    assert 0.8 <= s["centroid"]["peak"] <= 1.2
    text = M.to_csv(rs)
    assert text.splitlines()[0].startswith("variant,H,W,K,C,param,peak_bytes,pairwise_bytes")
    assert M.plot(rs, tmp_path / "m.png").stat().st_size > 0


def test_fit_slope_exact():
    rs = [M.BenchResult("x", s, s, 4, 8, 0, float(s**4), float(s**4), 0.0, 0.0) for s in (4, 8, 16)]
    assert M.fit_slope(rs, "peak_bytes") == pytest.approx(2.0)
