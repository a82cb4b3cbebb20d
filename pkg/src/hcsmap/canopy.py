"""Stage 1: canopy top height from 12-band imagery with sparse footprint labels."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .grid import IMAGE_BANDS, Grid, extract_patch
from .io import atomic_write, fpd_from_bytes, fpd_to_bytes
from .nn import Adam, DivergedError, Model, canopy_net, masked_mse_loss

log = logging.getLogger(__name__)

LIDAR = "lidar_footprint"
FORCED_ZERO = "forced_zero"
# scene-classification codes treated as non-vegetated (bare soil, water)
NON_VEGETATED = (5, 6)
CLOUD_FREE_BELOW = 0.10


@dataclass(frozen=True)
class FootprintSample:
    tile_id: int
    center_col: int
    center_row: int
    canopy_top_height: float
    source: str = LIDAR

    def __post_init__(self):
        if not self.canopy_top_height >= 0:
            raise ValueError("canopy_top_height must be >= 0")
        if self.source not in (LIDAR, FORCED_ZERO):
            raise ValueError(f"unknown source {self.source!r}")
        if self.source == FORCED_ZERO and self.canopy_top_height != 0:
            raise ValueError("forced_zero samples must have height 0")


@dataclass
class TrainConfig:
    patch_size: int = 15
    batch_size: int = 64
    iterations: int = 20_000
    learning_rate: float = 1e-4
    seed: int = 0
    holdout_fraction: float = 0.10
    cloud_pixel_threshold: float = 0.10
    cloud_prob_threshold: float = 0.10
    zero_cap: float = 0.20
    extra_zero_per_tile: int = 0
    width: int = 64
    blocks: int = 8
    eval_every: int = 500

    def __post_init__(self):
        for name in ("holdout_fraction", "cloud_pixel_threshold", "cloud_prob_threshold", "zero_cap"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.patch_size % 2 != 1:
            raise ValueError("patch_size must be odd")

    def to_dict(self):
        return asdict(self)


@dataclass
class Dataset:
    patches: np.ndarray  # (n, size, size, bands) float32
    heights: np.ndarray
    tile_ids: np.ndarray
    cols: np.ndarray
    rows: np.ndarray
    sources: np.ndarray
    skipped: int = 0
    dropped_cloudy: int = 0
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.heights)

    def subset(self, keep):
        keep = np.asarray(keep)
        return Dataset(self.patches[keep], self.heights[keep], self.tile_ids[keep], self.cols[keep],
                       self.rows[keep], self.sources[keep], self.skipped, self.dropped_cloudy, self.config)

    def to_bytes(self):
        records = zip(self.tile_ids, self.cols, self.rows, self.heights, self.sources)
        tiles = sorted({int(t) for t in self.tile_ids})
        cfg = dict(self.config, skipped=self.skipped, dropped_cloudy=self.dropped_cloudy)
        return fpd_to_bytes(list(records), self.patches, tiles, cfg)

    @classmethod
    def from_bytes(cls, data):
        h, records, patches = fpd_from_bytes(data)
        cfg = dict(h["config"])
        skipped, dropped = cfg.pop("skipped", 0), cfg.pop("dropped_cloudy", 0)
        cols = list(zip(*records)) if records else [[], [], [], [], []]
        return cls(patches, np.array(cols[3], dtype=np.float32), np.array(cols[0], dtype=np.int64),
                   np.array(cols[1], dtype=np.int64), np.array(cols[2], dtype=np.int64),
                   np.array(cols[4], dtype=object), skipped, dropped, cfg)

    def save(self, path):
        return atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def build_dataset(tiles, footprints, cfg: TrainConfig) -> Dataset:
    """Pair each footprint with the image patch around it.

    ``tiles`` maps tile id to ``(image, cloud_prob, scene_class)`` grids. Patches
    with more than ``cloud_pixel_threshold`` of their pixels above
    ``cloud_prob_threshold`` are dropped. Footprints on non-vegetated pixels are
    relabeled to zero height; ``extra_zero_per_tile`` further zero records are
    drawn at random non-vegetated pixels, and zero records are subsampled to at
    most ``zero_cap`` of the final dataset.
    """
    rng = np.random.default_rng([cfg.seed, 7])
    size = cfg.patch_size
    patches, heights, tids, cols, rows, sources = [], [], [], [], [], []
    skipped = dropped = 0

    def add(tid, image, cloud, col, row, height, source):
        nonlocal dropped
        cpatch, _ = extract_patch(cloud, col, row, size)
        if np.mean(cpatch > cfg.cloud_prob_threshold) > cfg.cloud_pixel_threshold:
            dropped += 1
            return
        patch, _ = extract_patch(image, col, row, size)
        patches.append(patch)
        heights.append(height)
        tids.append(tid)
        cols.append(col)
        rows.append(row)
        sources.append(source)

    for fp in footprints:
        if fp.tile_id not in tiles:
            skipped += 1
            continue
        image, cloud, scene = tiles[fp.tile_id]
        if not (0 <= fp.center_col < image.width and 0 <= fp.center_row < image.height):
            skipped += 1
            continue
        if image.bands != IMAGE_BANDS:
            raise ValueError(f"tile {fp.tile_id}: expected {IMAGE_BANDS} bands, got {image.bands}")
        height, source = fp.canopy_top_height, fp.source
        if int(scene.values[0, fp.center_row, fp.center_col]) in NON_VEGETATED:
            height, source = 0.0, FORCED_ZERO
        add(fp.tile_id, image, cloud, fp.center_col, fp.center_row, height, source)

    if cfg.extra_zero_per_tile:
        for tid in sorted(tiles):
            image, cloud, scene = tiles[tid]
            rr, cc = np.nonzero(np.isin(scene.values[0], NON_VEGETATED))
            if rr.size == 0:
                continue
            pick = rng.choice(rr.size, size=min(cfg.extra_zero_per_tile, rr.size), replace=False)
            for i in np.sort(pick):
                add(tid, image, cloud, int(cc[i]), int(rr[i]), 0.0, FORCED_ZERO)

    if skipped:
        log.warning("%d footprints outside their tile were skipped", skipped)
    n = len(heights)
    bands = next(iter(tiles.values()))[0].bands if tiles else IMAGE_BANDS
    ds = Dataset(np.array(patches, dtype=np.float32).reshape(n, size, size, bands),
                 np.array(heights, dtype=np.float32), np.array(tids, dtype=np.int64),
                 np.array(cols, dtype=np.int64), np.array(rows, dtype=np.int64),
                 np.array(sources, dtype=object), skipped, dropped, cfg.to_dict())

    zeros = np.flatnonzero(ds.sources == FORCED_ZERO)
    others = n - zeros.size
    if cfg.zero_cap < 1.0 and zeros.size > 0:
        limit = int(math.floor(cfg.zero_cap * others / (1.0 - cfg.zero_cap) + 1e-9))
        if zeros.size > limit:
            keep_zero = rng.choice(zeros, size=limit, replace=False)
            keep = np.ones(n, dtype=bool)
            keep[zeros] = False
            keep[keep_zero] = True
            ds = ds.subset(np.flatnonzero(keep))
    return ds


def split_tiles(tile_ids, holdout_fraction, seed):
    """Seeded tile-level split into ``(train_ids, val_ids)``.

    The validation count is ``ceil(fraction * n)``, so 914 tiles at 10 % give 92.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must be in (0, 1)")
    ids = sorted(set(int(t) for t in tile_ids))
    if len(ids) < 2:
        raise ValueError("need at least 2 tiles")
    n_val = min(max(1, math.ceil(holdout_fraction * len(ids) - 1e-9)), len(ids) - 1)
    perm = np.random.default_rng([seed, 3]).permutation(len(ids))
    val = sorted(ids[i] for i in perm[:n_val])
    train = sorted(ids[i] for i in perm[n_val:])
    return train, val


class TrainingDiverged(DivergedError):
    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainResult:
    model: Model
    optimizer: Adam
    trace: list  # (iteration, train_loss_ema in m^2, val_rmse in m)
    best_iteration: int
    best_val_rmse: float
    train_ids: list
    val_ids: list


def _standardize(ds_train):
    x = ds_train.patches.reshape(-1, ds_train.patches.shape[-1]).astype(np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    y = ds_train.heights.astype(np.float64)
    return mean, 1.0 / np.where(std > 0, std, 1.0), float(y.mean()), float(y.std() or 1.0)


def _center_inputs(model, patches):
    """Crop patches to the receptive field when it fits (valid mode is then exact)."""
    p = patches.shape[1]
    r = model.receptive_field
    if r <= p:
        c = (p - r) // 2
        return model.normalize(patches[:, c:c + r, c:c + r]), "valid", 0
    return model.normalize(patches), "reflect", p // 2


def predict_patches(model, x, padding, center, chunk=2048):
    out = []
    for i in range(0, len(x), chunk):
        y = model.forward(x[i:i + chunk], padding)
        out.append(y[:, center, center, 0].astype(np.float64))
    pred = np.concatenate(out) if out else np.zeros(0)
    return np.maximum(pred * model.output_scale + model.output_shift, 0.0)


def train_canopy(dataset: Dataset, cfg: TrainConfig, split=None) -> TrainResult:
    """Sparse-supervised training on footprint patches with a held-out tile set.

    Batches are drawn with replacement. Every ``eval_every`` iterations the
    held-out RMSE is measured and the best parameters are kept.
    """
    train_ids, val_ids = split or split_tiles(dataset.tile_ids, cfg.holdout_fraction, cfg.seed)
    tr = dataset.subset(np.flatnonzero(np.isin(dataset.tile_ids, train_ids)))
    va = dataset.subset(np.flatnonzero(np.isin(dataset.tile_ids, val_ids)))
    if len(tr) == 0:
        raise ValueError("empty training set")

    model = canopy_net(dataset.patches.shape[-1], cfg.width, cfg.blocks, seed=cfg.seed)
    model.input_shift, model.input_scale, model.output_shift, model.output_scale = _standardize(tr)
    xtr, padding, center = _center_inputs(model, tr.patches)
    ytr = ((tr.heights.astype(np.float64) - model.output_shift) / model.output_scale).astype(np.float32)
    xva = _center_inputs(model, va.patches)[0] if len(va) else None

    def val_rmse():
        if xva is None:
            return float("nan")
        pred = predict_patches(model, xva, padding, center)
        return float(np.sqrt(np.mean((pred - va.heights.astype(np.float64)) ** 2)))

    opt = Adam(cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 11])
    params = model.parameters()
    trace = []
    ema = None
    best = (val_rmse(), 0, model.copy_parameters())
    scale2 = model.output_scale ** 2

    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(0, len(tr), cfg.batch_size)
        out = model.forward(xtr[idx], padding)
        loss, g = masked_mse_loss(out[:, center, center, 0], ytr[idx])
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at iteration {it}", trace)
        if ema is None:
            ema = loss
            trace.append((0, loss * scale2, best[0]))
        ema = 0.98 * ema + 0.02 * loss
        up = np.zeros_like(out)
        up[:, center, center, 0] = g
        try:
            opt.step(params, model.backward(up))
        except DivergedError as e:
            raise TrainingDiverged(str(e), trace) from e
        if it % cfg.eval_every == 0 or it == cfg.iterations:
            v = val_rmse()
            trace.append((it, ema * scale2, v))
            log.info("iter %d  train mse %.3f  val rmse %.3f", it, ema * scale2, v)
            if not (v >= best[0]):
                best = (v, it, model.copy_parameters())
    if math.isfinite(best[0]):
        model.set_parameters(best[2])
    return TrainResult(model, opt, trace, best[1], best[0], list(train_ids), list(val_ids))


def predict_dense(model: Model, image: Grid, tile=256, overlap=None) -> Grid:
    """Height for every pixel; negative outputs clamp to 0, image nodata stays nodata."""
    if image.bands != model.in_channels:
        raise ValueError(f"band mismatch: model expects {model.in_channels}, image has {image.bands}")
    x = np.array(image.values.transpose(1, 2, 0), dtype=np.float64)
    if image.mask.any():
        x[image.mask] = model.input_shift
    mean, _ = model.predict_array(x, tile, overlap)
    h = np.maximum(mean, 0.0)
    h[image.mask] = 0.0
    return Grid(h, image.transform, image.mask, ("canopy_height",))


def composite(predictions, cloud_probs, threshold=CLOUD_FREE_BELOW) -> Grid:
    """Per-pixel mean of predictions whose cloud probability is below ``threshold``.

    Pixels without any qualifying prediction are nodata. Qualifying values are
    sorted per pixel before summation so the result does not depend on input order.
    """
    if not predictions or len(predictions) != len(cloud_probs):
        raise ValueError("need equal-length, non-empty prediction and cloud lists")
    ref = predictions[0]
    for g in list(predictions) + list(cloud_probs):
        if not g.aligned_with(ref):
            raise ValueError("grids are not co-registered")
    vals = np.stack([p.values[0].astype(np.float64) for p in predictions])
    ok = np.stack([(c.values[0] < threshold) & ~c.mask & ~p.mask for p, c in zip(predictions, cloud_probs)])
    count = ok.sum(axis=0)
    total = np.sort(np.where(ok, vals, 0.0), axis=0).sum(axis=0)
    nodata = count == 0
    mean = np.where(nodata, 0.0, total / np.maximum(count, 1))
    return Grid(mean, ref.transform, nodata, ref.band_names)


def select_least_cloudy(images, k):
    """The ``k`` acquisitions with the lowest mean cloud probability, in input order."""
    if k > len(images):
        raise ValueError("k exceeds the number of images")
    means = [float(np.mean(c.values[0][~c.mask])) if (~c.mask).any() else 1.0 for _, c in images]
    order = sorted(range(len(images)), key=lambda i: (means[i], i))[:k]
    return [images[i] for i in sorted(order)]
