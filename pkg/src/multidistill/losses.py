"""The three training losses and their aggregation.

* ``spatial_loss``: mean squared error between the student's dense features
  and a teacher's standardized features, evaluated only on the patch
  positions both shifted views observe. Because student and teacher views
  are shifted independently, any position-locked structure in the teacher
  output decorrelates from the student's own frame and averages away.
* ``mesa_loss``: the same windowed comparison between the live student and
  its EMA shadow, after per-patch affine-free layer norm, which steers
  optimization toward flat minima without pinning feature magnitudes.
* ``summary_loss``: squared angle between student and teacher summary
  embeddings, divided by the teacher's angular dispersion so that teachers
  with wide cones do not dominate teachers with narrow ones.

Every loss returns its scalar value together with the analytic gradient with
respect to the student-side input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CropMap, FeatureGrid
from .normstats import ln_noaffine, ln_noaffine_vjp

# Clamp bound for arccos: the gradient of arccos is singular at +-1, and a
# perfectly aligned pair would otherwise produce infinities right at the
# optimum. Inside the clamp the gradient is exact; outside it is zero.
COS_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Relative weights for the loss terms of one teacher plus the EMA term."""

    w_spatial: float = 1.0
    w_summary: float = 1.0
    w_mesa: float = 0.1

    def __post_init__(self):
        if self.w_spatial < 0 or self.w_summary < 0 or self.w_mesa < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.w_spatial == 0 and self.w_summary == 0 and self.w_mesa == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class TermRecord:
    """One evaluated (or skipped) loss term."""

    name: str  # e.g. "spatial/teacher0", "mesa"
    value: float
    weight: float
    omega: int  # overlap size the term was averaged over; 0 for summary terms
    skipped: bool = False


@dataclass
class LossReport:
    terms: list[TermRecord] = field(default_factory=list)
    resolution: int | None = None  # view pixels of the step this report covers

    def add(self, name: str, value: float, weight: float, omega: int = 0) -> None:
        self.terms.append(TermRecord(name, float(value), float(weight), int(omega)))

    def add_skipped(self, name: str, weight: float) -> None:
        self.terms.append(TermRecord(name, 0.0, float(weight), 0, skipped=True))

    @property
    def total(self) -> float:
        return aggregate(self)


def _gather_bounds(cmap: CropMap) -> tuple[slice, slice, slice, slice]:
    """Source and destination slices realizing a crop map's overlap."""
    o = cmap.overlap
    ddy = cmap.dst_offset[0] - cmap.src_offset[0]
    ddx = cmap.dst_offset[1] - cmap.src_offset[1]
    src_r = slice(o.row0 + ddy, o.row0 + ddy + o.rows)
    src_c = slice(o.col0 + ddx, o.col0 + ddx + o.cols)
    dst_r = slice(o.row0, o.row0 + o.rows)
    dst_c = slice(o.col0, o.col0 + o.cols)
    return src_r, src_c, dst_r, dst_c


def spatial_loss(
    x: FeatureGrid, y_hat: FeatureGrid, cmap: CropMap
) -> tuple[float, np.ndarray]:
    """Dense feature matching over the common view region.

    Parameters
    ----------
    x : student features, on the student view's grid.
    y_hat : teacher features, already standardized, on the teacher view's grid.
    cmap : correspondence from the student view to the teacher view; must be
        non-empty.

    Returns
    -------
    (value, grad) where ``value`` is the squared error averaged over overlap
    positions and channels, and ``grad`` has ``x.data``'s shape with nonzero
    entries only at positions inside the overlap.
    """
    if cmap.empty:
        raise ValueError("empty overlap: caller must skip this loss term")
    if x.channels != y_hat.channels:
        raise ValueError(f"channel mismatch: student {x.channels}, teacher {y_hat.channels}")
    src_r, src_c, dst_r, dst_c = _gather_bounds(cmap)
    diff = x.data[src_r, src_c] - y_hat.data[dst_r, dst_c]
    denom = diff.size  # |Omega| * channels
    value = float(np.sum(diff * diff) / denom)
    grad = np.zeros_like(x.data)
    grad[src_r, src_c] = (2.0 / denom) * diff
    return value, grad


def mesa_loss(
    x: FeatureGrid, x_tilde: FeatureGrid, cmap: CropMap
) -> tuple[float, np.ndarray]:
    """Match the student to its EMA shadow across independently shifted views.

    Both feature grids are layer-normalized per patch vector (no affine), the
    student side is mapped onto the EMA view, and the squared error is
    averaged over the overlap and channels. The EMA side is a constant:
    gradients flow only into ``x``.
    """
    if cmap.empty:
        raise ValueError("empty overlap: caller must skip this loss term")
    if x.channels != x_tilde.channels:
        raise ValueError(f"channel mismatch: {x.channels} vs {x_tilde.channels}")
    src_r, src_c, dst_r, dst_c = _gather_bounds(cmap)
    x_ln = ln_noaffine(x.data)
    t_ln = ln_noaffine(x_tilde.data)
    diff = x_ln[src_r, src_c] - t_ln[dst_r, dst_c]
    denom = diff.size
    value = float(np.sum(diff * diff) / denom)
    g_ln = np.zeros_like(x.data)
    g_ln[src_r, src_c] = (2.0 / denom) * diff
    grad = ln_noaffine_vjp(x.data, g_ln)
    return value, grad


def _angle_with_grad(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Angle between x and y plus d(angle)/dx, with the arccos clamp."""
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx <= 1e-12 or ny <= 1e-12:
        raise ValueError("summary loss needs nonzero-norm inputs")
    c_raw = float(np.dot(x, y) / (nx * ny))
    c = float(np.clip(c_raw, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP))
    theta = float(np.arccos(c))
    if c_raw != c:
        # Outside the clamp the angle is constant, so the gradient vanishes;
        # this is what makes perfect alignment a finite stationary point.
        return theta, np.zeros_like(x)
    dc_dx = y / (nx * ny) - c_raw * x / (nx * nx)
    dtheta_dc = -1.0 / np.sqrt(1.0 - c * c)
    return theta, dtheta_dc * dc_dx


def summary_loss(
    x: np.ndarray, y: np.ndarray, dispersion: float
) -> tuple[float, np.ndarray]:
    """Squared student-teacher angle, normalized by the teacher's cone radius.

    Dividing by the teacher's angular dispersion expresses the error relative
    to how spread that teacher's own embeddings are, which stops wide-cone
    teachers from dominating narrow-cone ones.
    """
    if dispersion <= 0:
        raise ValueError(f"dispersion must be positive, got {dispersion}")
    theta, dtheta_dx = _angle_with_grad(np.asarray(x, float), np.asarray(y, float))
    value = theta * theta / dispersion
    grad = (2.0 * theta / dispersion) * dtheta_dx
    return float(value), grad


def cosine_summary_loss(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Plain ``1 - cos`` summary loss, kept as the unbalanced baseline."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    nx = float(np.linalg.norm(x))
    ny = float(np.linalg.norm(y))
    if nx <= 1e-12 or ny <= 1e-12:
        raise ValueError("summary loss needs nonzero-norm inputs")
    c = float(np.dot(x, y) / (nx * ny))
    dc_dx = y / (nx * ny) - c * x / (nx * nx)
    return 1.0 - c, -dc_dx


def aggregate(report: LossReport) -> float:
    """Weighted sum of the non-skipped terms of a report.

    Skipped terms (empty overlaps) contribute nothing and do not enter any
    normalization. Raises if every term was skipped, since that leaves the
    step with no training signal.
    """
    live = [t for t in report.terms if not t.skipped]
    if not live:
        raise ValueError("all loss terms were skipped; nothing to aggregate")
    return float(sum(t.weight * t.value for t in live))
