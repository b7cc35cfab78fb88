"""Teacher calibration statistics.

Two kinds of statistics are fit per teacher before training starts:

* per-channel mean and scale of the dense features, used to standardize every
  teacher onto a comparable magnitude so no single teacher's activations
  dominate the feature loss (distribution balancing by per-channel
  standardization);
* the mean direction and angular dispersion of the summary embeddings, used
  to normalize each teacher's cone radius in the summary loss.

Also home to the affine-free layer norm used by the EMA-matching loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .geometry import FeatureGrid

SCALE_FLOOR = 1e-6
DISPERSION_FLOOR = 1e-4
MEAN_DIR_EPS = 1e-8
LN_EPS = 1e-6


@dataclass
class TeacherStats:
    """Frozen calibration result for one teacher."""

    channel_mean: np.ndarray  # (C,)
    channel_scale: np.ndarray  # (C,), strictly positive
    mean_dir: np.ndarray  # (D,), unit norm
    dispersion: float  # > 0
    sample_count: int

    def __post_init__(self):
        if not np.all(self.channel_scale > 0):
            raise ValueError("channel_scale must be strictly positive")
        if abs(float(np.linalg.norm(self.mean_dir)) - 1.0) > 1e-6:
            raise ValueError("mean_dir must be unit norm")
        if self.dispersion <= 0:
            raise ValueError("dispersion must be positive")


class FeatureMoments:
    """Streaming per-channel mean/variance accumulator (Welford update)."""

    def __init__(self, channels: int):
        self.count = 0
        self.mean = np.zeros(channels)
        self.m2 = np.zeros(channels)

    def update(self, feat: FeatureGrid) -> None:
        flat = feat.data.reshape(-1, feat.channels).astype(float)
        for vec in flat:
            self.count += 1
            delta = vec - self.mean
            self.mean += delta / self.count
            self.m2 += delta * (vec - self.mean)

    def update_batch(self, feat: FeatureGrid) -> None:
        # pairwise moment merge of a whole grid at once; numerically
        # equivalent to per-vector updates well within 1e-6.
        flat = feat.data.reshape(-1, feat.channels).astype(float)
        n_b = flat.shape[0]
        if n_b == 0:
            return
        mean_b = flat.mean(axis=0)
        m2_b = ((flat - mean_b) ** 2).sum(axis=0)
        n_a = self.count
        n = n_a + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self.m2 = self.m2 + m2_b + delta**2 * (n_a * n_b / n)
        self.count = n

    def finalize(self) -> tuple[np.ndarray, np.ndarray]:
        if self.count < 2:
            raise ValueError(f"need at least 2 patch vectors, saw {self.count}")
        scale = np.sqrt(self.m2 / self.count)  # population variance
        return self.mean.copy(), np.maximum(scale, SCALE_FLOOR)


def fit_feature_stats(samples: Iterable[FeatureGrid]) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and standard deviation over all patch positions.

    Streams over the sample grids; the scale is floored at a small epsilon so
    constant channels stay invertible.
    """
    acc = None
    for feat in samples:
        if acc is None:
            acc = FeatureMoments(feat.channels)
        acc.update_batch(feat)
    if acc is None:
        raise ValueError("empty feature stream")
    return acc.finalize()


def normalize_features(feat: FeatureGrid, stats: TeacherStats) -> FeatureGrid:
    if feat.channels != stats.channel_mean.shape[0]:
        raise ValueError(
            f"channel mismatch: features have {feat.channels}, stats have {stats.channel_mean.shape[0]}"
        )
    return FeatureGrid((feat.data - stats.channel_mean) / stats.channel_scale, feat.patch)


def denormalize_features(feat: FeatureGrid, stats: TeacherStats) -> FeatureGrid:
    if feat.channels != stats.channel_mean.shape[0]:
        raise ValueError(
            f"channel mismatch: features have {feat.channels}, stats have {stats.channel_mean.shape[0]}"
        )
    return FeatureGrid(feat.data * stats.channel_scale + stats.channel_mean, feat.patch)


def angle_between(x: np.ndarray, y: np.ndarray) -> float:
    """Angle in radians between two nonzero vectors."""
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("zero-norm vector has no direction")
    c = float(np.dot(x, y) / (nx * ny))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def fit_summary_stats(summaries: Iterable[np.ndarray]) -> tuple[np.ndarray, float]:
    """Mean direction and angular dispersion of a stream of summary vectors.

    The mean direction is the normalized expectation of the raw vectors; the
    dispersion is the mean squared angle between each vector and that
    direction, floored so it stays usable as a loss divisor even for a
    degenerate teacher whose summaries all coincide.
    """
    vecs = np.asarray(list(summaries), dtype=float)
    if vecs.ndim != 2 or vecs.shape[0] < 2:
        raise ValueError("need at least 2 summary vectors")
    mean = vecs.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm <= MEAN_DIR_EPS:
        raise ValueError(f"directionless teacher: ||E[y]|| = {norm:.3e}")
    mean_dir = mean / norm
    cosines = (vecs @ mean_dir) / np.linalg.norm(vecs, axis=1)
    angles = np.arccos(np.clip(cosines, -1.0, 1.0))
    dispersion = float(np.mean(angles**2))
    return mean_dir, max(dispersion, DISPERSION_FLOOR)


def ln_noaffine(v: np.ndarray) -> np.ndarray:
    """Layer norm without learnable affine parameters, along the last axis.

    Population variance; the epsilon keeps constant vectors finite (they map
    to zero).
    """
    v = np.asarray(v, dtype=float)
    mean = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    return (v - mean) / np.sqrt(var + LN_EPS)


def ln_noaffine_vjp(v: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(grad_out * ln_noaffine(v))`` with respect to ``v``."""
    v = np.asarray(v, dtype=float)
    mean = v.mean(axis=-1, keepdims=True)
    var = v.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    vhat = (v - mean) * inv
    g_mean = grad_out.mean(axis=-1, keepdims=True)
    gv_mean = (grad_out * vhat).mean(axis=-1, keepdims=True)
    return inv * (grad_out - g_mean - vhat * gv_mean)
