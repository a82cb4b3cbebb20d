"""Synthetic world with known ground truth.

Everything here is a pure function of the config and its seed: a smooth canopy
height field, a power-law carbon reference with additive noise, a scene-class
layer, zones, multi-band imagery with clouds, and sparse noisy height
footprints.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .canopy import FootprintSample
from .grid import IMAGE_BANDS, GeoTransform, Grid, nearest_resample

SCL_VEGETATION = 4
SCL_NOT_VEGETATED = 5

# 1/e lag of the phase-averaged correlation of smoothstep value noise, in units
# of the lattice spacing (numerical integration of the interpolation weights).
_EFOLD_PER_SPACING = 0.772

# Per-band response to canopy height: base + amp * exp(-h / scale).
_BAND_BASE = np.array([0.08, 0.10, 0.09, 0.15, 0.30, 0.35, 0.38, 0.40, 0.22, 0.18, 0.12, 0.25])
_BAND_AMP = np.array([0.12, 0.10, 0.14, 0.08, -0.12, -0.15, -0.18, -0.20, 0.10, 0.14, 0.16, -0.10])
_BAND_SCALE = np.linspace(8.0, 60.0, IMAGE_BANDS)
CLOUD_BRIGHTNESS = 0.9


@dataclass
class WorldConfig:
    seed: int = 0
    extent: int = 256
    correlation_length: float = 24.0
    max_height: float = 55.0
    texture_noise_sd: float = 0.004
    cloud_fraction: float = 0.1
    footprint_density: float = 300.0
    allometry_a: float = 1.7
    allometry_b: float = 1.2
    carbon_noise_sd: float = 10.0
    label_noise_sd: float = 2.0
    jitter: int = 1
    nonveg_fraction: float = 0.08
    tile_size: int = 128
    n_zones: int = 4
    pixel_size: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.cloud_fraction <= 1.0:
            raise ValueError("cloud_fraction must be in [0, 1]")
        if not 0.0 <= self.nonveg_fraction < 1.0:
            raise ValueError("nonveg_fraction must be in [0, 1)")
        for name in ("extent", "correlation_length", "max_height", "allometry_a",
                     "allometry_b", "tile_size", "n_zones", "pixel_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("texture_noise_sd", "footprint_density", "carbon_noise_sd",
                     "label_noise_sd", "jitter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self):
        return asdict(self)


class World(NamedTuple):
    height: Grid
    carbon: Grid
    scene_class: Grid
    zones: Grid


def _rng(cfg, stream):
    return np.random.default_rng([cfg.seed, stream])


def _transform(cfg):
    return GeoTransform(0.0, cfg.extent * cfg.pixel_size, cfg.pixel_size)


def value_noise(shape, spacing, rng):
    """Smoothstep-interpolated lattice of uniform values, in [0, 1]."""
    h, w = shape
    ny = int(np.ceil(h / spacing)) + 2
    nx = int(np.ceil(w / spacing)) + 2
    lattice = rng.random((ny, nx))
    oy, ox = rng.random(2) * spacing

    def axis(n, off):
        u = (np.arange(n) + off) / spacing
        i = np.floor(u).astype(np.intp)
        t = u - i
        return i, t * t * (3.0 - 2.0 * t)

    iy, sy = axis(h, oy)
    ix, sx = axis(w, ox)
    sx = sx[None, :]
    top = lattice[iy][:, ix] * (1 - sx) + lattice[iy][:, ix + 1] * sx
    bot = lattice[iy + 1][:, ix] * (1 - sx) + lattice[iy + 1][:, ix + 1] * sx
    return top * (1 - sy[:, None]) + bot * sy[:, None]


def height_field(cfg: WorldConfig):
    """Smooth canopy height in [0, max_height] before non-vegetated masking."""
    spacing = cfg.correlation_length / _EFOLD_PER_SPACING
    v = value_noise((cfg.extent, cfg.extent), spacing, _rng(cfg, 1))
    return cfg.max_height * np.clip((v - 0.15) / 0.7, 0.0, 1.0)


def allometry(height, a, b):
    return a * np.power(np.maximum(height, 0.0), b)


def gen_world(cfg: WorldConfig) -> World:
    shape = (cfg.extent, cfg.extent)
    t = _transform(cfg)
    h = height_field(cfg)

    if cfg.nonveg_fraction > 0:
        nv = value_noise(shape, cfg.correlation_length / (2 * _EFOLD_PER_SPACING), _rng(cfg, 2))
        bare = nv < np.quantile(nv, cfg.nonveg_fraction)
    else:
        bare = np.zeros(shape, dtype=bool)
    h = np.where(bare, 0.0, h)
    scene = np.where(bare, SCL_NOT_VEGETATED, SCL_VEGETATION)

    noise = _rng(cfg, 3).normal(0.0, cfg.carbon_noise_sd, shape) if cfg.carbon_noise_sd > 0 else 0.0
    carbon = np.maximum(allometry(h, cfg.allometry_a, cfg.allometry_b) + noise, 0.0)

    r = _rng(cfg, 4)
    centers = r.random((cfg.n_zones, 2)) * cfg.extent
    yy, xx = np.mgrid[0:cfg.extent, 0:cfg.extent] + 0.5
    d = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
    zones = np.argmin(d, axis=0) + 1

    return World(Grid(h, t, band_names=("height",)), Grid(carbon, t, band_names=("carbon",)),
                 Grid(scene, t, band_names=("scene_class",)), Grid(zones, t, band_names=("zone",)))


def noise_floor(cfg: WorldConfig):
    """Irreducible error levels of the synthetic references."""
    return {"label_noise_sd": cfg.label_noise_sd, "carbon_noise_sd": cfg.carbon_noise_sd}


def band_response(height):
    """Noise- and cloud-free reflectance for each band, shape (12, ...)."""
    h = np.asarray(height, dtype=np.float64)
    scale = _BAND_SCALE.reshape((-1,) + (1,) * h.ndim)
    return (_BAND_BASE.reshape(scale.shape) + _BAND_AMP.reshape(scale.shape) * np.exp(-h[None] / scale))


def gen_images(height: Grid, cfg: WorldConfig, acquisitions: int):
    """Acquisitions of 12-band imagery and their cloud-probability grids."""
    if acquisitions < 1:
        raise ValueError("acquisitions must be >= 1")
    clean = band_response(height.values[0])
    shape = (height.height, height.width)
    out = []
    for k in range(acquisitions):
        r = _rng(cfg, 100 + k)
        img = clean.copy()
        if cfg.texture_noise_sd > 0:
            img += r.normal(0.0, cfg.texture_noise_sd, img.shape)
        frac = min(1.0, cfg.cloud_fraction * r.uniform(0.0, 2.0))
        prob = np.zeros(shape)
        if frac > 0:
            field = value_noise(shape, 2 * cfg.correlation_length / _EFOLD_PER_SPACING, r)
            thr = np.quantile(field, 1.0 - frac)
            prob = np.clip(0.1 + (field - thr) / 0.04, 0.0, 1.0)
            img = (1.0 - prob[None]) * img + prob[None] * CLOUD_BRIGHTNESS
        names = tuple(f"B{i + 1}" for i in range(IMAGE_BANDS))
        out.append((Grid(img, height.transform, height.mask, names),
                    Grid(prob, height.transform, band_names=("cloud_prob",))))
    return out


def gen_footprints(height: Grid, cfg: WorldConfig):
    """Sparse noisy height samples, one Bernoulli draw per pixel."""
    r = _rng(cfg, 5)
    p = cfg.footprint_density * (cfg.pixel_size / 1000.0) ** 2
    if p <= 0:
        raise ValueError("footprint density yields no samples")
    h = height.values[0].astype(np.float64)
    rows, cols = np.nonzero(r.random(h.shape) < min(p, 1.0))
    n = rows.size
    j = int(cfg.jitter)
    dy = r.integers(-j, j + 1, n) if j else np.zeros(n, dtype=int)
    dx = r.integers(-j, j + 1, n) if j else np.zeros(n, dtype=int)
    noise = r.normal(0.0, cfg.label_noise_sd, n) if cfg.label_noise_sd > 0 else np.zeros(n)
    sy = np.clip(rows + dy, 0, h.shape[0] - 1)
    sx = np.clip(cols + dx, 0, h.shape[1] - 1)
    labels = np.maximum(h[sy, sx] + noise, 0.0)
    ts = cfg.tile_size
    ntx = -(-h.shape[1] // ts)
    return [FootprintSample(int((rr // ts) * ntx + cc // ts), int(cc % ts), int(rr % ts), float(lab))
            for rr, cc, lab in zip(rows, cols, labels)]


def tile_windows(grid: Grid, tile_size: int):
    """Row-major square tiles keyed by tile id, matching gen_footprints ids."""
    ntx = -(-grid.width // tile_size)
    tiles = {}
    for r0 in range(0, grid.height, tile_size):
        for c0 in range(0, grid.width, tile_size):
            tid = (r0 // tile_size) * ntx + c0 // tile_size
            tiles[tid] = grid.window(r0, min(r0 + tile_size, grid.height), c0, min(c0 + tile_size, grid.width))
    return tiles


def gen_overlays(cfg: WorldConfig):
    """Oil-palm and coconut tree densities (10 m) and an urban layer (100 m -> 10 m)."""
    shape = (cfg.extent, cfg.extent)
    t = _transform(cfg)
    spacing = cfg.correlation_length / _EFOLD_PER_SPACING
    palm_f = value_noise(shape, spacing, _rng(cfg, 6))
    coco_f = value_noise(shape, spacing, _rng(cfg, 7))
    palm = np.where(palm_f > np.quantile(palm_f, 0.93), 0.6, 0.15 * palm_f)
    coco = np.where(coco_f > np.quantile(coco_f, 0.95), 0.7, 0.3 * coco_f)
    coarse_n = max(1, int(round(cfg.extent * cfg.pixel_size / 100.0)))
    urb_f = value_noise((coarse_n, coarse_n), max(2.0, coarse_n / 4), _rng(cfg, 8))
    urban_coarse = Grid((urb_f > np.quantile(urb_f, 0.96)).astype(np.float32),
                        GeoTransform(t.origin_x, t.origin_y, 100.0), band_names=("urban",))
    urban = nearest_resample(urban_coarse, cfg.pixel_size)
    if urban.height != cfg.extent or urban.width != cfg.extent:
        pad = np.zeros(shape, dtype=np.float32)
        hh, ww = min(urban.height, cfg.extent), min(urban.width, cfg.extent)
        pad[:hh, :ww] = urban.values[0, :hh, :ww]
        urban = Grid(pad, t, band_names=("urban",))
    return (Grid(palm, t, band_names=("oil_palm_density",)),
            Grid(coco, t, band_names=("coconut_density",)), urban)
