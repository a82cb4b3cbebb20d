"""Georeferenced multi-band rasters with an explicit nodata mask.

Grids are immutable: every operation returns a new grid. Values are stored
band-major as ``(bands, height, width)`` float32 and the mask is
``(height, width)`` with True marking invalid pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

IMAGE_BANDS = 12


@dataclass(frozen=True)
class GeoTransform:
    origin_x: float
    origin_y: float
    pixel_size: float

    def __post_init__(self):
        if not self.pixel_size > 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")

    def map(self, col, row):
        """Map coordinates of the upper-left corner of pixel (col, row)."""
        return (self.origin_x + col * self.pixel_size, self.origin_y - row * self.pixel_size)

    def inverse_map(self, x, y):
        return ((x - self.origin_x) / self.pixel_size, (self.origin_y - y) / self.pixel_size)

    def center(self, col, row):
        return self.map(col + 0.5, row + 0.5)


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Grid:
    values: np.ndarray
    transform: GeoTransform
    mask: np.ndarray = None
    band_names: tuple = field(default=())

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3:
            raise ValueError("values must be (bands, height, width)")
        mask = self.mask
        if mask is None:
            mask = np.zeros(values.shape[1:], dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != values.shape[1:]:
            raise ValueError(f"mask shape {mask.shape} does not match grid {values.shape[1:]}")
        names = tuple(self.band_names) or tuple(f"b{i}" for i in range(values.shape[0]))
        if len(names) != values.shape[0]:
            raise ValueError("one band name per band required")
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "mask", _frozen(mask))
        object.__setattr__(self, "band_names", names)

    @property
    def bands(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]

    @property
    def shape(self):
        return self.values.shape

    @property
    def valid(self):
        return ~self.mask

    def band(self, i=0):
        return self.values[i]

    def with_values(self, values, mask=None, band_names=()):
        return Grid(values, self.transform, self.mask if mask is None else mask, band_names)

    def window(self, row0, row1, col0, col1):
        t = self.transform
        x, y = t.map(col0, row0)
        return Grid(self.values[:, row0:row1, col0:col1], GeoTransform(x, y, t.pixel_size),
                    self.mask[row0:row1, col0:col1], self.band_names)

    def aligned_with(self, other):
        return (self.height, self.width) == (other.height, other.width) and self.transform == other.transform


def _axis_stencil(n_src, n_out, scale, offset):
    """Left source index and fractional weight for each output pixel center.

    Source coordinate u is measured in source pixel-center units. Near the edges
    the two-point stencil is clamped inward, which turns interpolation into linear
    extrapolation and keeps affine fields exact.
    """
    u = (np.arange(n_out) + 0.5) * scale - 0.5 + offset
    if n_src == 1:
        return np.zeros(n_out, dtype=np.intp), np.zeros(n_out)
    i0 = np.clip(np.floor(u).astype(np.intp), 0, n_src - 2)
    return i0, u - i0


def bilinear_resample(src: Grid, target_pixel_size: float) -> Grid:
    """Resample to a new pixel size over the same map extent.

    Output dimensions are the source extent divided by the target size, rounded to
    the nearest integer. Output pixels whose stencil puts non-zero weight on a
    nodata source pixel become nodata.
    """
    if src.bands < 1 or src.width == 0 or src.height == 0:
        raise ValueError("empty input")
    if not target_pixel_size > 0:
        raise ValueError("target_pixel_size must be positive")
    ps = src.transform.pixel_size
    ratio = target_pixel_size / ps
    out_w = max(1, int(round(src.width * ps / target_pixel_size)))
    out_h = max(1, int(round(src.height * ps / target_pixel_size)))
    c0, tx = _axis_stencil(src.width, out_w, ratio, 0.0)
    r0, ty = _axis_stencil(src.height, out_h, ratio, 0.0)
    c1 = np.minimum(c0 + 1, src.width - 1)
    r1 = np.minimum(r0 + 1, src.height - 1)

    v = src.values.astype(np.float64)
    tx_ = tx[None, None, :]
    ty_ = ty[None, :, None]
    top = v[:, r0][:, :, c0] * (1 - tx_) + v[:, r0][:, :, c1] * tx_
    bot = v[:, r1][:, :, c0] * (1 - tx_) + v[:, r1][:, :, c1] * tx_
    out = top * (1 - ty_) + bot * ty_

    m = src.mask
    wx0, wx1 = (tx != 1.0)[None, :], (tx != 0.0)[None, :]
    wy0, wy1 = (ty != 1.0)[:, None], (ty != 0.0)[:, None]
    mask = ((m[r0][:, c0] & wy0 & wx0) | (m[r0][:, c1] & wy0 & wx1)
            | (m[r1][:, c0] & wy1 & wx0) | (m[r1][:, c1] & wy1 & wx1))
    out[:, mask] = 0.0
    t = GeoTransform(src.transform.origin_x, src.transform.origin_y, target_pixel_size)
    return Grid(out.astype(np.float32), t, mask, src.band_names)


def nearest_resample(src: Grid, target_pixel_size: float) -> Grid:
    """Nearest-neighbor resampling for categorical layers (same extent rule)."""
    if src.bands < 1 or src.width == 0 or src.height == 0:
        raise ValueError("empty input")
    ps = src.transform.pixel_size
    out_w = max(1, int(round(src.width * ps / target_pixel_size)))
    out_h = max(1, int(round(src.height * ps / target_pixel_size)))
    ratio = target_pixel_size / ps
    cols = np.clip(np.floor((np.arange(out_w) + 0.5) * ratio).astype(np.intp), 0, src.width - 1)
    rows = np.clip(np.floor((np.arange(out_h) + 0.5) * ratio).astype(np.intp), 0, src.height - 1)
    t = GeoTransform(src.transform.origin_x, src.transform.origin_y, target_pixel_size)
    return Grid(src.values[:, rows][:, :, cols], t, src.mask[rows][:, cols], src.band_names)


def upsample_bands(image: Grid, band_native_sizes, target_pixel_size=None) -> Grid:
    """Bring every band of a multi-resolution image to the target pixel size.

    ``image`` sits on the target grid with coarse bands block-replicated at their
    native size (the way mixed-resolution products are usually delivered). Each
    coarse band is reduced back to its native raster by block means and bilinearly
    resampled; bands already at the target size are copied untouched.
    """
    target = image.transform.pixel_size if target_pixel_size is None else target_pixel_size
    if len(band_native_sizes) != image.bands:
        raise ValueError("one native size per band required")
    out = np.array(image.values, dtype=np.float32)
    mask = image.mask.copy()
    for b, size in enumerate(band_native_sizes):
        factor = size / target
        if factor < 1 or abs(factor - round(factor)) > 1e-9:
            raise ValueError(f"band {b}: native size {size} is not an integer multiple of {target}")
        f = int(round(factor))
        if f == 1:
            continue
        h, w = image.height, image.width
        nh, nw = math.ceil(h / f), math.ceil(w / f)
        padded = np.full((nh * f, nw * f), np.nan)
        padded[:h, :w] = np.where(image.mask, np.nan, image.values[b])
        blocks = padded.reshape(nh, f, nw, f)
        counts = np.sum(~np.isnan(blocks), axis=(1, 3))
        sums = np.nansum(blocks, axis=(1, 3))
        native_mask = counts == 0
        native = np.where(native_mask, 0.0, sums / np.maximum(counts, 1))
        t = image.transform
        coarse = Grid(native, GeoTransform(t.origin_x, t.origin_y, size), native_mask)
        fine = bilinear_resample(coarse, target)
        out[b] = fine.values[0, :h, :w]
        mask |= fine.mask[:h, :w]
    return Grid(out, image.transform, mask, image.band_names)


def reflect_index(idx, n):
    """Reflect indices into [0, n) without repeating the edge sample."""
    idx = np.asarray(idx)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def extract_patch(image: Grid, center_col: int, center_row: int, size: int):
    """Return a ``(size, size, bands)`` patch and its out-of-bounds flags.

    Cells outside the grid are filled by reflection; the boolean flag array marks
    them.
    """
    if size % 2 != 1:
        raise ValueError("patch size must be odd")
    if not (0 <= center_col < image.width and 0 <= center_row < image.height):
        raise ValueError(f"center ({center_col}, {center_row}) outside grid")
    half = size // 2
    rows = np.arange(center_row - half, center_row + half + 1)
    cols = np.arange(center_col - half, center_col + half + 1)
    oob = ((rows < 0) | (rows >= image.height))[:, None] | ((cols < 0) | (cols >= image.width))[None, :]
    rr = reflect_index(rows, image.height)
    cc = reflect_index(cols, image.width)
    patch = image.values[:, rr][:, :, cc].transpose(1, 2, 0)
    return np.ascontiguousarray(patch), oob


@dataclass(frozen=True)
class Window:
    """A processing window and the core region it is responsible for."""

    row0: int
    row1: int
    col0: int
    col1: int
    core_row0: int
    core_row1: int
    core_col0: int
    core_col1: int

    @property
    def core_in_window(self):
        return (slice(self.core_row0 - self.row0, self.core_row1 - self.row0),
                slice(self.core_col0 - self.col0, self.core_col1 - self.col0))


def iterate_tiles(grid, tile: int, overlap: int):
    """Split a grid into overlapping windows.

    Cores of side ``tile - 2*overlap`` partition the grid; each window is its core
    grown by ``overlap`` pixels on every side, clipped at the grid border. Any
    operator whose footprint radius is at most ``overlap`` gives the same core
    values on a window as on the whole grid.
    """
    if isinstance(grid, Grid):
        height, width = grid.height, grid.width
    else:
        height, width = grid
    if tile <= 2 * overlap:
        raise ValueError("tile must exceed 2*overlap")
    core = tile - 2 * overlap
    windows = []
    for r in range(0, height, core):
        r1 = min(r + core, height)
        for c in range(0, width, core):
            c1 = min(c + core, width)
            windows.append(Window(max(r - overlap, 0), min(r1 + overlap, height),
                                  max(c - overlap, 0), min(c1 + overlap, width),
                                  r, r1, c, c1))
    return windows
