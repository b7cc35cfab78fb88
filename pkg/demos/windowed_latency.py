"""
Windowed attention pays off at high resolution
==============================================

Global self-attention is quadratic in token count, so doubling image side
quadruples tokens and roughly sixteen-folds attention work. Restricting
most layers to fixed w x w windows makes their cost linear in tokens.
This run times full forwards of the same architecture with an all-window-8
schedule against an all-global schedule and prints the medians.
"""

from multidistill.evalbench import bench_attention
from multidistill.student import LayerScope, StudentConfig

base = dict(dim=64, depth=4, heads=4, patch=16)
win8 = StudentConfig(schedule=(LayerScope(8),) * 4, **base)
full = StudentConfig(schedule=(LayerScope(None),) * 4, **base)

records, skips = bench_attention(
    [("win8", win8), ("global", full)], [256, 512, 1024], warmup=2, trials=5
)

print(f"{'variant':8s}{'px':>6s}{'median_s':>12s}{'attn flops':>14s}")
for r in records:
    print(f"{r.variant:8s}{r.resolution:6d}{r.median_s:12.4f}{r.flops:14d}")

med = {(r.variant, r.resolution): r.median_s for r in records}
for px in (256, 512, 1024):
    gap = med[("global", px)] - med[("win8", px)]
    print(f"global minus win8 at {px:4d}px: {gap:+.4f}s")
print("the gap should widen as resolution grows")
