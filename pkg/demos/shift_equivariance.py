"""
Why the dense loss is computed over shifted crops
=================================================

Student and teacher each see a patch-aligned crop of a shared canvas, and
the dense loss is averaged over the region both crops cover. Two things
should then be true: the loss reads only the relative displacement between
the crops, never where the pair sits on the canvas, and for a teacher whose
features depend only on content, the teacher's own crop position changes
nothing either. A teacher with a position-locked component breaks the
second property - which is exactly the signal the training loop uses to
reject that component.
"""

import numpy as np

from multidistill.data import random_image
from multidistill.geometry import PatchGrid, ShiftSample, overlap_region
from multidistill.losses import spatial_loss
from multidistill.teachers import SyntheticTeacherSpec, synth_forward

patch, side, margin = 16, 4, 4
view_px = side * patch
grid = PatchGrid(side, side, patch)

rng = np.random.default_rng(0)
canvas = random_image(rng, view_px + 2 * margin * patch)


def crop(shift):
    r0 = (margin + shift.dy) * patch
    c0 = (margin + shift.dx) * patch
    return canvas[r0:r0 + view_px, c0:c0 + view_px]


def loss(spec_x, spec_y, s, t):
    x = synth_forward(spec_x, crop(s))[1]
    y = synth_forward(spec_y, crop(t))[1]
    return spatial_loss(x, y, overlap_region(grid, s, t))[0]


content_a = SyntheticTeacherSpec(channels=6, summary_dim=8, patch=patch, semantic_seed=1)
content_b = SyntheticTeacherSpec(channels=6, summary_dim=8, patch=patch, semantic_seed=2)

# slide the same two feature grids around the canvas in lockstep: the
# overlap bookkeeping reads only the relative displacement, so the score
# cannot move
x0 = synth_forward(content_a, crop(ShiftSample(1, -1)))[1]
y0 = synth_forward(content_b, crop(ShiftSample(-1, 1)))[1]
print("common shift of both views (loss should not move):")
for dy, dx in ((0, 0), (1, 1), (-2, 1), (2, -2)):
    s = ShiftSample(1 + dy, -1 + dx)
    t = ShiftSample(-1 + dy, 1 + dx)
    val = spatial_loss(x0, y0, overlap_region(grid, s, t))[0]
    print(f"  delta=({dy:+d},{dx:+d})  loss = {val:.12f}")

# now vary only the teacher's draw; a content-only teacher cannot tell
print("teacher-only shifts, content-only teacher (still flat):")
for t in (ShiftSample(0, 0), ShiftSample(2, 1), ShiftSample(-2, -2)):
    print(f"  teacher at ({t.dy:+d},{t.dx:+d})  loss = {loss(content_a, content_a, ShiftSample(0, 0), t):.12f}")

# a position-locked component rides on the view frame, so now the draw matters
biased = SyntheticTeacherSpec(
    channels=6, summary_dim=8, patch=patch, semantic_seed=1, bias_amplitude=1.0
)
print("teacher-only shifts, position-locked component added (loss moves):")
for t in (ShiftSample(0, 0), ShiftSample(2, 1), ShiftSample(-2, -2)):
    print(f"  teacher at ({t.dy:+d},{t.dx:+d})  loss = {loss(content_a, biased, ShiftSample(0, 0), t):.6f}")
