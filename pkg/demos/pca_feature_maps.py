"""
Looking at feature grids: top-3 principal components as RGB
===========================================================

High-dimensional feature grids are hard to eyeball. Projecting every patch
vector onto the three leading principal components of the whole set and
min-max scaling each component to a color channel gives a quick picture:
same color, same feature neighborhood. Components are pooled across all
images so colors are comparable between them.
"""

import os

import numpy as np

from multidistill.data import grating_image
from multidistill.evalbench import pca_components, pca_rgb
from multidistill.teachers import SyntheticTeacherSpec, synth_forward

spec = SyntheticTeacherSpec(channels=32, summary_dim=32, patch=16, semantic_seed=4)
rng = np.random.default_rng(0)

# gratings at a few orientations, so the feature maps have visible structure
images = [grating_image(rng, 128, orientation, 2.0) for orientation in
          (0.0, np.pi / 4, np.pi / 2)]
grids = [synth_forward(spec, img)[1] for img in images]

# how much of the variance the three displayed components carry
pooled = np.concatenate([g.data.reshape(-1, g.channels) for g in grids])
_, _, variances = pca_components(pooled)
total = float(np.var(pooled - pooled.mean(axis=0), axis=0).sum())
print(f"top-3 components carry {variances.sum() / total:.1%} of feature variance")

out_dir = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(out_dir, exist_ok=True)
for path in pca_rgb(grids, out_dir, prefix="grating"):
    print(f"wrote {path}")
print("any PPM viewer (or most image tools) can open these")
