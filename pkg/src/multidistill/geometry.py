"""Patch-aligned view geometry.

Student and teacher each see a crop of a shared oversized canvas, offset by a
whole number of patches. This module computes those shifts, the correspondence
map between two shifted views, the overlapping region both views observe, and
the mosaic layouts used to feed fixed-input-size teachers. Everything is exact
integer lattice arithmetic; no interpolation happens here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Training resolution partitions (pixels, square inputs).
LOW_RESOLUTIONS = (128, 192, 224, 256, 384, 432)
HIGH_RESOLUTIONS = (512, 768, 1024, 1152)


@dataclass(frozen=True)
class PatchGrid:
    """A token grid: ``rows x cols`` patches of ``patch`` pixels each."""

    rows: int
    cols: int
    patch: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.patch < 1:
            raise ValueError(f"invalid PatchGrid {self.rows}x{self.cols} patch={self.patch}")

    @property
    def pixels(self) -> tuple[int, int]:
        return (self.rows * self.patch, self.cols * self.patch)

    @property
    def tokens(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class ShiftSample:
    """A whole-patch view offset (signed, row then column)."""

    dy: int
    dx: int


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in patch coordinates: origin plus extent."""

    row0: int
    col0: int
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"empty Rect {self}")

    @property
    def area(self) -> int:
        return self.rows * self.cols


@dataclass(frozen=True)
class CropMap:
    """Correspondence between two equally shaped views of one canvas.

    ``src_offset`` and ``dst_offset`` are the view origins on the canvas, in
    patches. ``overlap`` is the region both views observe, expressed in
    destination-view coordinates; ``None`` means the views are disjoint and
    the caller must skip whatever loss term depends on this map.
    """

    src_offset: tuple[int, int]
    dst_offset: tuple[int, int]
    overlap: Rect | None

    @property
    def empty(self) -> bool:
        return self.overlap is None


@dataclass(frozen=True)
class FeatureGrid:
    """Dense patch-token features, shape (rows, cols, channels)."""

    data: np.ndarray
    patch: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"FeatureGrid data must be 3-d, got shape {self.data.shape}")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid(self.rows, self.cols, self.patch)


@dataclass(frozen=True)
class MosaicLayout:
    """Placement of several equally sized images on one canvas grid."""

    canvas: PatchGrid
    tiles: tuple[tuple[int, Rect], ...]  # (image id, placement) in row-major order


def sample_shift(rng: np.random.Generator, max_shift: int) -> ShiftSample:
    """Draw a view offset uniformly from the (2*max_shift+1)^2 integer grid."""
    if max_shift < 0:
        raise ValueError(f"max_shift must be >= 0, got {max_shift}")
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    return ShiftSample(int(dy), int(dx))


def overlap_region(grid: PatchGrid, s_shift: ShiftSample, t_shift: ShiftSample) -> CropMap:
    """Correspondence between a source view and a destination view.

    Both views have ``grid``'s shape and sit on a common canvas at their
    respective shift offsets. The returned overlap is the intersection of the
    two translated grids, in destination-view coordinates. The overlap extent
    along each axis is ``max(0, extent - |shift difference|)``.
    """
    ddy = s_shift.dy - t_shift.dy
    ddx = s_shift.dx - t_shift.dx
    n_rows = grid.rows - abs(ddy)
    n_cols = grid.cols - abs(ddx)
    if n_rows <= 0 or n_cols <= 0:
        overlap = None
    else:
        overlap = Rect(max(ddy, 0), max(ddx, 0), n_rows, n_cols)
    return CropMap(
        src_offset=(s_shift.dy, s_shift.dx),
        dst_offset=(t_shift.dy, t_shift.dx),
        overlap=overlap,
    )


def invert_crop_map(cmap: CropMap) -> CropMap:
    """Swap source and destination roles, re-expressing the overlap."""
    if cmap.empty:
        return CropMap(cmap.dst_offset, cmap.src_offset, None)
    ddy = cmap.dst_offset[0] - cmap.src_offset[0]
    ddx = cmap.dst_offset[1] - cmap.src_offset[1]
    o = cmap.overlap
    return CropMap(
        cmap.dst_offset,
        cmap.src_offset,
        Rect(o.row0 + ddy, o.col0 + ddx, o.rows, o.cols),
    )


def identity_map(grid: PatchGrid) -> CropMap:
    return CropMap((0, 0), (0, 0), Rect(0, 0, grid.rows, grid.cols))


def apply_crop_map(feat: FeatureGrid, cmap: CropMap) -> FeatureGrid:
    """Gather source-view features onto the overlap, in destination coordinates.

    Pure integer gather: shifts are whole patches, so no resampling occurs.
    Raises on an empty map (the caller should have skipped the term) and on a
    feature grid that does not match the map's source view.
    """
    if cmap.empty:
        raise ValueError("cannot apply an empty CropMap; skip this term instead")
    o = cmap.overlap
    # Destination overlap point (i, j) lies at canvas position dst_offset + (i, j),
    # which the source view indexes at (i, j) + dst_offset - src_offset.
    ddy = cmap.dst_offset[0] - cmap.src_offset[0]
    ddx = cmap.dst_offset[1] - cmap.src_offset[1]
    r0, c0 = o.row0 + ddy, o.col0 + ddx
    r1, c1 = r0 + o.rows, c0 + o.cols
    if r0 < 0 or c0 < 0 or r1 > feat.rows or c1 > feat.cols:
        raise ValueError(
            f"feature grid {feat.rows}x{feat.cols} does not cover the map's "
            f"source region [{r0}:{r1}, {c0}:{c1}]"
        )
    return FeatureGrid(feat.data[r0:r1, c0:c1], feat.patch)


def crop_rect(feat: FeatureGrid, rect: Rect) -> FeatureGrid:
    """Slice a rectangle (in the grid's own coordinates) out of a feature grid."""
    if rect.row0 < 0 or rect.col0 < 0 or rect.row0 + rect.rows > feat.rows or rect.col0 + rect.cols > feat.cols:
        raise ValueError(f"rect {rect} outside grid {feat.rows}x{feat.cols}")
    return FeatureGrid(
        feat.data[rect.row0 : rect.row0 + rect.rows, rect.col0 : rect.col0 + rect.cols],
        feat.patch,
    )


def sample_resolution(rng: np.random.Generator, partition: str) -> int:
    """Draw a training resolution uniformly from the named partition."""
    if partition == "low":
        pool = LOW_RESOLUTIONS
    elif partition == "high":
        pool = HIGH_RESOLUTIONS
    else:
        raise ValueError(f"partition must be 'low' or 'high', got {partition!r}")
    return pool[int(rng.integers(0, len(pool)))]


def pack_mosaic(images: list[PatchGrid], canvas: PatchGrid) -> MosaicLayout:
    """Tile a canvas with a regular n x n grid of equally sized images.

    The image count must be a perfect square and the canvas must divide
    evenly into that many tiles, each matching the images' shape. Tiles are
    laid out row-major and cover the canvas exactly.
    """
    count = len(images)
    n = int(np.sqrt(count))
    if n * n != count or count == 0:
        raise ValueError(f"mosaic needs a perfect-square image count, got {count}")
    if canvas.rows % n or canvas.cols % n:
        raise ValueError(f"canvas {canvas.rows}x{canvas.cols} not divisible into {n}x{n} tiles")
    t_rows, t_cols = canvas.rows // n, canvas.cols // n
    for idx, grid in enumerate(images):
        if (grid.rows, grid.cols) != (t_rows, t_cols) or grid.patch != canvas.patch:
            raise ValueError(
                f"image {idx} is {grid.rows}x{grid.cols} patch={grid.patch}; "
                f"tiles are {t_rows}x{t_cols} patch={canvas.patch}"
            )
    tiles = tuple(
        (i * n + j, Rect(i * t_rows, j * t_cols, t_rows, t_cols))
        for i in range(n)
        for j in range(n)
    )
    return MosaicLayout(canvas, tiles)
