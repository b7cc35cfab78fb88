"""Desk-scale multi-teacher feature distillation in numpy.

Subpackages and modules:

- geometry: patch grids, random shifts, crop maps, mosaics
- normstats: teacher calibration statistics and affine-free layer norm
- losses: spatial, summary and self-matching distillation losses
- student: any-resolution transformer with hand-written gradients
- teachers: synthetic frozen teachers and feature dump I/O
- trainer: distillation loop, optimizer, checkpoints
- evalbench: probes, feature diagnostics, attention benchmarks
- cli: command-line entry points
"""

__version__ = "0.1.0"
