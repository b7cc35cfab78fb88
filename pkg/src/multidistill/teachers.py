"""Synthetic frozen teachers.

A synthetic teacher decomposes its dense output into a content part plus a
position-locked part, mirroring the decomposition of a transformer's output
into content features and a data-invariant positional bias:

    features = f(local patch statistics) + bias_amplitude * g(frame position)

``f`` is a fixed random projection of per-patch statistics that are zero on
constant patches and depend only on patch content, so the content part
commutes with patch-aligned shifts by construction. ``g`` is a deterministic
low-frequency field plus a high-magnitude border ring, evaluated in the
teacher's own view frame, NOT on the shared canvas: it is exactly the
shift-dependent nuisance the training losses are supposed to reject.

Summary embeddings are drawn deterministically (a content hash seeds the
draw) from a uniform spherical cap around a fixed teacher direction, whose
half-angle controls the teacher's angular dispersion.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.special import betainc, betaincinv

from .geometry import CropMap, FeatureGrid, PatchGrid, Rect, crop_rect, pack_mosaic
from .normstats import fit_summary_stats
from .student.ops import bilinear_weights

_STAT_COUNT = 8

# sub-stream tags under a teacher's semantic seed
_SEED_PROJECTION = 0
_SEED_BIAS = 1
_SEED_DIRECTION = 2

BIAS_PATTERNS = ("sinusoid_border", "sinusoid", "border")


@dataclass(frozen=True)
class SyntheticTeacherSpec:
    channels: int = 32
    summary_dim: int = 128
    patch: int = 16
    semantic_seed: int = 0
    bias_amplitude: float = 0.0
    bias_pattern: str = "sinusoid_border"
    cone_angle: float = 0.3
    native: int | None = None  # None: any patch-aligned size; else exact pixels

    def __post_init__(self):
        if self.channels < 1 or self.summary_dim < 2 or self.patch < 1:
            raise ValueError("channels, summary_dim and patch must be positive")
        if self.bias_amplitude < 0:
            raise ValueError("bias_amplitude must be >= 0")
        if not 0 <= self.cone_angle < np.pi / 2:
            raise ValueError(f"cone_angle must lie in [0, pi/2), got {self.cone_angle}")
        if self.bias_pattern not in BIAS_PATTERNS:
            raise ValueError(f"unknown bias_pattern {self.bias_pattern!r}")
        if self.native is not None and self.native % self.patch:
            raise ValueError("native size must be a patch multiple")


def _rng_for(spec: SyntheticTeacherSpec, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((spec.semantic_seed, tag)))


def _zero_sum_masks(p: int) -> np.ndarray:
    """Five (p, p) masks, each summing to zero, probing patch structure."""
    i = np.arange(p)[:, None] * np.ones((1, p))
    j = np.ones((p, 1)) * np.arange(p)[None, :]
    half = (p - 1) / 2.0
    lr = np.sign(j - half)
    tb = np.sign(i - half)
    center = ((np.abs(i - half) <= p / 4) & (np.abs(j - half) <= p / 4)).astype(float)
    center -= center.mean()
    diag = np.sign(j - i)
    checker = np.where((i + j) % 2 == 0, 1.0, -1.0)
    checker -= checker.mean()  # odd p leaves a residue otherwise
    return np.stack([lr, tb, center, diag, checker])


def patch_statistics(image: np.ndarray, patch: int) -> np.ndarray:
    """(rows, cols, 8) per-patch content statistics, all zero on flat patches."""
    h, w, _ = image.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    rows, cols = h // patch, w // patch
    gray = image.mean(axis=2)
    blocks = gray.reshape(rows, patch, cols, patch).transpose(0, 2, 1, 3)
    stats = np.empty((rows, cols, _STAT_COUNT))
    stats[:, :, 0] = blocks.std(axis=(2, 3))
    stats[:, :, 1] = np.abs(np.diff(blocks, axis=2)).mean(axis=(2, 3)) if patch > 1 else 0.0
    stats[:, :, 2] = np.abs(np.diff(blocks, axis=3)).mean(axis=(2, 3)) if patch > 1 else 0.0
    masks = _zero_sum_masks(patch)
    stats[:, :, 3:8] = np.einsum("rcij,mij->rcm", blocks, masks) / (patch * patch)
    return stats


def semantic_projection(spec: SyntheticTeacherSpec) -> np.ndarray:
    rng = _rng_for(spec, _SEED_PROJECTION)
    return rng.normal(0.0, 1.0, (_STAT_COUNT, spec.channels)) / np.sqrt(_STAT_COUNT)


def bias_field(spec: SyntheticTeacherSpec, rows: int, cols: int) -> np.ndarray:
    """The position-locked field g at every view-frame position, (rows, cols, C).

    A per-channel low-frequency plane wave (period a handful of patches) plus
    a strong ring on the outermost patch positions of the frame. Depends only
    on local frame indices, never on canvas position or image content.
    """
    rng = _rng_for(spec, _SEED_BIAS)
    c = spec.channels
    fy = rng.integers(1, 4, size=c)
    fx = rng.integers(1, 4, size=c)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=c)
    border_vec = 3.0 * rng.normal(0.0, 1.0, size=c)
    i = np.arange(rows)[:, None, None]
    j = np.arange(cols)[None, :, None]
    out = np.zeros((rows, cols, c))
    if spec.bias_pattern in ("sinusoid_border", "sinusoid"):
        out += np.sin(2.0 * np.pi * (fy * i + fx * j) / 16.0 + phase)
    if spec.bias_pattern in ("sinusoid_border", "border"):
        edge = np.zeros((rows, cols, 1))
        edge[0, :], edge[-1, :], edge[:, 0], edge[:, -1] = 1.0, 1.0, 1.0, 1.0
        out += edge * border_vec
    return out


def teacher_direction(spec: SyntheticTeacherSpec) -> np.ndarray:
    rng = _rng_for(spec, _SEED_DIRECTION)
    v = rng.normal(size=spec.summary_dim)
    return v / np.linalg.norm(v)


def _cap_polar_cosine(dim: int, angle: float, u: np.ndarray) -> np.ndarray:
    """Map uniforms to z = cos(theta) for a uniform cap of half-angle ``angle``.

    z has density proportional to (1-z^2)^((dim-3)/2), so t = (1+z)/2 follows
    Beta(a, a) with a = (dim-1)/2, truncated to [t_min, 1]. The cap carries a
    vanishing upper-tail mass of that Beta in high dimension, so the CDF is
    inverted through the lower tail (Beta(a, a) is symmetric): tiny masses
    stay representable there instead of rounding the CDF to 1.0.
    """
    a = (dim - 1) / 2.0
    t_min = (1.0 + np.cos(angle)) / 2.0
    q_min = betainc(a, a, 1.0 - t_min)  # upper-tail mass of the cap
    q = (1.0 - u) * q_min
    t = 1.0 - betaincinv(a, a, q)
    return np.clip(2.0 * t - 1.0, -1.0, 1.0)


def sample_cap(rng: np.random.Generator, mu: np.ndarray, angle: float, size: int) -> np.ndarray:
    """Uniform draws from the spherical cap of half-angle ``angle`` about mu."""
    d = mu.shape[0]
    if angle == 0.0:
        return np.tile(mu, (size, 1))
    z = _cap_polar_cosine(d, angle, rng.random(size))
    w = rng.normal(size=(size, d))
    w -= np.outer(w @ mu, mu)
    norms = np.linalg.norm(w, axis=1, keepdims=True)
    w /= np.maximum(norms, 1e-30)
    s = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return z[:, None] * mu + s[:, None] * w


def cap_dispersion_formula(angle: float, dim: int) -> float:
    """Closed-form mean squared polar angle over a uniform spherical cap."""
    if angle == 0.0:
        return 0.0
    num = quad(lambda t: t * t * np.sin(t) ** (dim - 2), 0.0, angle)[0]
    den = quad(lambda t: np.sin(t) ** (dim - 2), 0.0, angle)[0]
    return num / den


def measured_cap_dispersion(angle, dim, n=1024, seed=0, _draws=None):
    """Dispersion of cap samples as the calibration pass would measure it.

    Uses the empirical mean direction, like ``fit_summary_stats``, so the
    estimator's small-sample bias is included rather than idealized away.
    ``_draws`` lets the bisection reuse one set of uniforms (common random
    numbers), which makes the measured value monotone in the angle.
    """
    mu = np.zeros(dim)
    mu[0] = 1.0
    if _draws is None:
        rng = np.random.default_rng(seed)
        u = rng.random(n)
        w = rng.normal(size=(n, dim))
    else:
        u, w = _draws
    z = _cap_polar_cosine(dim, angle, u)
    tang = w - np.outer(w @ mu, mu)
    tang /= np.maximum(np.linalg.norm(tang, axis=1, keepdims=True), 1e-30)
    s = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    vecs = z[:, None] * mu + s[:, None] * tang
    _, disp = fit_summary_stats(list(vecs))
    return disp


def cone_angle_for_dispersion(target: float, dim: int, n: int = 1024, seed: int = 0) -> float:
    """Invert measured dispersion to a cap half-angle by bisection.

    Calibrates against the measured (not idealized) dispersion on ``n``
    samples with common random numbers, so a later calibration pass of
    similar size lands near ``target``. Raises if the target exceeds what a
    sub-quarter-turn cap can reach at this dimension.
    """
    if target <= 0:
        raise ValueError("target dispersion must be positive")
    rng = np.random.default_rng(seed)
    draws = (rng.random(n), rng.normal(size=(n, dim)))
    hi = np.pi / 2.0 - 1e-6
    reachable = measured_cap_dispersion(hi, dim, _draws=draws)
    if target > reachable:
        raise ValueError(
            f"dispersion {target} unreachable at dim {dim}: cap maxes out near "
            f"{reachable:.4f}; raise summary_dim"
        )
    lo = 1e-4
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if measured_cap_dispersion(mid, dim, _draws=draws) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _content_digest(spec: SyntheticTeacherSpec, image: np.ndarray) -> int:
    gray = image.mean(axis=2)
    stats = np.array(
        [
            gray.mean(),
            gray.std(),
            float(np.abs(np.diff(gray, axis=0)).mean()) if gray.shape[0] > 1 else 0.0,
            float(np.abs(np.diff(gray, axis=1)).mean()) if gray.shape[1] > 1 else 0.0,
            gray.max(),
            gray.min(),
        ],
        dtype=np.float64,
    )
    h = hashlib.sha256()
    h.update(int(spec.semantic_seed).to_bytes(8, "little", signed=True))
    h.update(stats.astype("<f8").tobytes())
    return int.from_bytes(h.digest()[:8], "little")


def summary_for_image(spec: SyntheticTeacherSpec, image: np.ndarray) -> np.ndarray:
    """Deterministic cap draw keyed by the image's global statistics."""
    rng = np.random.default_rng(_content_digest(spec, image))
    mu = teacher_direction(spec)
    return sample_cap(rng, mu, spec.cone_angle, 1)[0]


def extract_view(canvas: np.ndarray, view: CropMap, patch: int) -> np.ndarray:
    """Pixel crop of a canvas image for one view's overlap rectangle."""
    if view.empty:
        raise ValueError("cannot extract an empty view")
    o = view.overlap
    ddy = view.dst_offset[0] - view.src_offset[0]
    ddx = view.dst_offset[1] - view.src_offset[1]
    r0, c0 = (o.row0 + ddy) * patch, (o.col0 + ddx) * patch
    r1, c1 = r0 + o.rows * patch, c0 + o.cols * patch
    if r0 < 0 or c0 < 0 or r1 > canvas.shape[0] or c1 > canvas.shape[1]:
        raise ValueError(
            f"view [{r0}:{r1}, {c0}:{c1}] px outside canvas {canvas.shape[:2]}"
        )
    return canvas[r0:r1, c0:c1]


def synth_forward(
    spec: SyntheticTeacherSpec, image: np.ndarray, view: CropMap | None = None
) -> tuple[np.ndarray, FeatureGrid]:
    """Run a synthetic teacher on one view.

    ``image`` is the pixels the teacher sees; pass ``view`` to crop it out of
    a larger canvas first. The positional part of the output is computed in
    the resulting view frame either way.
    """
    if view is not None:
        image = extract_view(image, view, spec.patch)
    h, w, _ = image.shape
    if spec.native is not None and (h, w) != (spec.native, spec.native):
        raise ValueError(
            f"fixed-resolution teacher expects {spec.native}x{spec.native} px, got {h}x{w}"
        )
    stats = patch_statistics(image, spec.patch)
    feats = stats @ semantic_projection(spec)
    if spec.bias_amplitude > 0:
        feats = feats + spec.bias_amplitude * bias_field(spec, *feats.shape[:2])
    return summary_for_image(spec, image), FeatureGrid(feats, spec.patch)


def fixedres_forward(
    spec: SyntheticTeacherSpec, images: list[np.ndarray]
) -> list[tuple[np.ndarray, FeatureGrid, CropMap]]:
    """Feed several equal-size images through a fixed-resolution teacher.

    The images are packed into one native-size mosaic canvas, the teacher
    runs once on that canvas, and each entry of the result is the tile's
    summary (from its own content), its feature crop, and the CropMap from
    the canvas grid to the tile grid.
    """
    if spec.native is None:
        raise ValueError("mosaic packing is for fixed-resolution teachers")
    if not images:
        raise ValueError("no images to pack")
    p = spec.patch
    tiles = [PatchGrid(im.shape[0] // p, im.shape[1] // p, p) for im in images]
    side = spec.native // p
    layout = pack_mosaic(tiles, PatchGrid(side, side, p))
    canvas = np.zeros((spec.native, spec.native, images[0].shape[2]))
    for (idx, rect), im in zip(layout.tiles, images):
        canvas[
            rect.row0 * p : (rect.row0 + rect.rows) * p,
            rect.col0 * p : (rect.col0 + rect.cols) * p,
        ] = im
    _, canvas_feats = synth_forward(spec, canvas)
    out = []
    for (idx, rect), im in zip(layout.tiles, images):
        tile_feats = crop_rect(canvas_feats, rect)
        tile_map = CropMap(
            src_offset=(0, 0),
            dst_offset=(rect.row0, rect.col0),
            overlap=Rect(0, 0, rect.rows, rect.cols),
        )
        out.append((summary_for_image(spec, im), tile_feats, tile_map))
    return out


def upsample_features(feat: FeatureGrid, factor: int) -> FeatureGrid:
    """Bilinear grid upsampling by an integer factor, corners aligned."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return feat
    return resize_features(feat, feat.rows * factor, feat.cols * factor)


def resize_features(feat: FeatureGrid, rows: int, cols: int) -> FeatureGrid:
    """Bilinear resampling of a feature grid to an arbitrary shape.

    Corners aligned, each output vector a convex combination of inputs. Used
    to carry a teacher's grid onto the student's when their token counts
    disagree (fixed-input teachers fed resized views).
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"target grid {rows}x{cols} is empty")
    if (rows, cols) == (feat.rows, feat.cols):
        return feat
    wr = bilinear_weights(feat.rows, rows)
    wc = bilinear_weights(feat.cols, cols)
    data = np.einsum("rp,cq,pqd->rcd", wr, wc, feat.data, optimize=True)
    return FeatureGrid(data, feat.patch)
