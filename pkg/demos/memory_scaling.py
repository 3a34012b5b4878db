"""Peak memory of pixel-wise, block-wise and centroid contrastive losses as the image grows.

Run: python demos/memory_scaling.py [out_dir]
"""
import sys
from pathlib import Path

from centroid_uda import membench

out = Path(sys.argv[1] if len(sys.argv) > 1 else "membench_demo")
out.mkdir(parents=True, exist_ok=True)
results = membench.run_sweep(sizes=(8, 16, 24, 32, 48), variants=("pixel", "block", "centroid", "mpccl"))
for r in results:
    print(f"{r.variant:9s} {r.H:3d}x{r.W:<3d} peak {r.peak_bytes / 2**20:8.2f} MiB  pairwise {r.pairwise_bytes / 2**20:8.3f} MiB")
for v, s in membench.slopes(results).items():
    print(f"{v:9s} log-log slope vs H*W: peak {s['peak']:.2f}, pairwise {s['pairwise']:.2f}")
(out / "membench.csv").write_text(membench.to_csv(results))
print("plot:", membench.plot(results, out / "membench.png"))
