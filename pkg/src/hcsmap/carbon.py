"""Stage 2: carbon density from canopy height with a five-member deep ensemble."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .evalstats import CARBON_LABELS, ConfusionMatrix, RegressionMetrics, confusion, regression_metrics
from .grid import Grid
from .hcs import Binary, HcsThresholds, binary_collapse, classify_carbon
from .io import write_json
from .nn import Adam, Model, carbon_net, gaussian_nll_loss, load_model, save_model

log = logging.getLogger(__name__)

ENSEMBLE_SIZE = 5


@dataclass
class CarbonConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    window: int = 64
    width: int = 32
    depth: int = 7
    power_law: bool = False

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class RegionSplit:
    """Column intervals ``[start, stop)`` of the train, validation and test regions."""

    train: tuple
    val: tuple
    test: tuple

    def __post_init__(self):
        spans = sorted((tuple(s) for s in (self.train, self.val, self.test) if s[1] > s[0]))
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ValueError("train/validation/test regions overlap")
        if self.train[1] <= self.train[0]:
            raise ValueError("empty training region")

    def columns(self, name, width):
        c0, c1 = getattr(self, name)
        m = np.zeros(width, dtype=bool)
        m[c0:c1] = True
        return m


def geographic_split(width, test_fraction=20 / 190, val_fraction=0.10):
    """Train | validation | test column bands, west to east.

    The test band takes ``test_fraction`` of the columns (20 of 190 km in the
    calibration site); validation takes ``val_fraction`` of the remaining
    training columns next to it.
    """
    n_test = max(1, int(round(width * test_fraction)))
    n_rest = width - n_test
    n_val = int(round(n_rest * val_fraction))
    return RegionSplit((0, n_rest - n_val), (n_rest - n_val, n_rest), (n_rest, width))


@dataclass
class CarbonEnsemble:
    members: list
    seeds: list
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for m in self.members:
            if m.heads != ("mean", "log_variance"):
                raise ValueError("ensemble members need mean and log-variance heads")
            if m.receptive_field != 15:
                raise ValueError("ensemble members need a 15-pixel receptive field")

    def config_hash(self):
        return hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for k, (m, s) in enumerate(zip(self.members, self.seeds)):
            name = f"member_{k}.nnp"
            save_model(d / name, m, meta={"seed": s, "member": k})
            files.append(name)
        write_json(d / "manifest.json", {"seeds": list(self.seeds), "config": self.config,
                                         "config_hash": self.config_hash(), "members": files})
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        man = json.loads((d / "manifest.json").read_text())
        members = [load_model(d / f)[0] for f in man["members"]]
        return cls(members, man["seeds"], man["config"])


@dataclass
class CarbonPrediction:
    mean: Grid
    variance: Grid


def _windows(start, stop, size):
    size = min(size, stop - start)
    starts = list(range(start, stop - size + 1, size))
    if starts[-1] + size < stop:
        starts.append(stop - size)
    return [(s, s + size) for s in starts]


def _valid_mask(height, carbon_ref, exclude):
    valid = ~height.mask & ~carbon_ref.mask
    if exclude is not None:
        ex = exclude.values[0] != 0 if isinstance(exclude, Grid) else np.asarray(exclude, dtype=bool)
        valid &= ~ex
    return valid


def train_member(height: Grid, carbon_ref: Grid, split: RegionSplit, seed, cfg: CarbonConfig,
                 exclude=None) -> Model:
    """Train one member for ``cfg.epochs`` epochs; the final parameters are kept.

    An epoch visits every ``window x window`` block of the training region once, in
    a seeded random order, one ADAM step per block. Each block is fed with a halo
    of the receptive-field radius so its loss pixels see the same context as in
    dense inference.
    """
    if not height.aligned_with(carbon_ref):
        raise ValueError("height and carbon reference are not co-registered")
    valid = _valid_mask(height, carbon_ref, exclude)
    c0, c1 = split.train
    h = height.values[0].astype(np.float64)
    y = carbon_ref.values[0].astype(np.float64)
    tv = valid[:, c0:c1]
    if not tv.any():
        raise ValueError("no valid training pixels")

    model = carbon_net(cfg.width, cfg.depth, cfg.power_law, seed=seed)
    hs = h[:, c0:c1][tv]
    ys = y[:, c0:c1][tv]
    model.input_shift = np.zeros(1)
    model.input_scale = np.array([1.0 / (hs.std() or 1.0)])
    model.output_shift = float(ys.mean())
    model.output_scale = float(ys.std() or 1.0)
    xn = model.normalize(h[..., None])
    yn = ((y - model.output_shift) / model.output_scale).astype(np.float32)

    halo = model.receptive_field // 2
    H, W = h.shape
    blocks = [(r, c) for r in _windows(0, H, cfg.window) for c in _windows(c0, c1, cfg.window)]
    opt = Adam(cfg.learning_rate)
    params = model.parameters()
    rng = np.random.default_rng([seed, 17])
    for epoch in range(cfg.epochs):
        total = 0.0
        for b in rng.permutation(len(blocks)):
            (r0, r1), (q0, q1) = blocks[b]
            m = valid[r0:r1, q0:q1]
            if not m.any():
                continue
            wr0, wr1 = max(r0 - halo, 0), min(r1 + halo, H)
            wq0, wq1 = max(q0 - halo, 0), min(q1 + halo, W)
            out = model.forward(xn[None, wr0:wr1, wq0:wq1, :])
            core = (0, slice(r0 - wr0, r1 - wr0), slice(q0 - wq0, q1 - wq0))
            loss, (gm, gv) = gaussian_nll_loss(out[core + (0,)], out[core + (1,)], yn[r0:r1, q0:q1], m)
            if not math.isfinite(loss):
                raise FloatingPointError(f"diverged: non-finite loss in epoch {epoch}")
            up = np.zeros_like(out)
            up[core + (0,)] = gm
            up[core + (1,)] = gv
            opt.step(params, model.backward(up))
            model.project()
            total += loss
        log.debug("seed %s epoch %d loss %.4f", seed, epoch, total / max(len(blocks), 1))
    return model


def train_carbon_ensemble(height: Grid, carbon_ref: Grid, split: RegionSplit, seeds,
                          cfg: CarbonConfig = CarbonConfig(), exclude=None) -> CarbonEnsemble:
    seeds = list(seeds)
    if len(seeds) != ENSEMBLE_SIZE:
        raise ValueError(f"need {ENSEMBLE_SIZE} seeds")
    members = [train_member(height, carbon_ref, split, s, cfg, exclude) for s in seeds]
    return CarbonEnsemble(members, seeds, dict(cfg.to_dict(), split=asdict(split)))


def member_predictions(ensemble: CarbonEnsemble, height: Grid, tile=256):
    x = height.values[0].astype(np.float64)[..., None]
    return [m.predict_array(x, tile) for m in ensemble.members]


def predict_carbon(ensemble: CarbonEnsemble, height: Grid, tile=256) -> CarbonPrediction:
    """Ensemble mean (clamped at 0) and total variance.

    Variance = mean of member variances + variance of member means.
    """
    if len(ensemble.members) != ENSEMBLE_SIZE:
        raise ValueError(f"ensemble must have {ENSEMBLE_SIZE} members, has {len(ensemble.members)}")
    preds = member_predictions(ensemble, height, tile)
    means = np.stack([p[0] for p in preds])
    variances = np.stack([p[1] for p in preds])
    mean = np.maximum(means.mean(axis=0), 0.0)
    var = variances.mean(axis=0) + means.var(axis=0)
    mean[height.mask] = 0.0
    var[height.mask] = 0.0
    t = height.transform
    return CarbonPrediction(Grid(mean, t, height.mask, ("carbon_mean",)),
                            Grid(var, t, height.mask, ("carbon_variance",)))


@dataclass
class EvalReport:
    metrics: RegressionMetrics
    deciles: list  # (ref_lo, ref_hi, mean_ref, mean_pred, count)
    top_decile_slope: float
    saturated: bool
    confusion6: ConfusionMatrix | None = None
    confusion2: ConfusionMatrix | None = None

    def to_dict(self):
        return {"metrics": self.metrics.to_dict(), "deciles": [list(d) for d in self.deciles],
                "top_decile_slope": self.top_decile_slope, "saturated": self.saturated,
                "confusion6": self.confusion6.to_dict() if self.confusion6 else None,
                "confusion2": self.confusion2.to_dict() if self.confusion2 else None}


def saturation_deciles(pred, ref):
    edges = np.quantile(ref, np.linspace(0, 1, 11))
    idx = np.clip(np.searchsorted(edges, ref, side="right") - 1, 0, 9)
    rows = []
    for k in range(10):
        sel = idx == k
        if sel.any():
            rows.append((float(edges[k]), float(edges[k + 1]), float(ref[sel].mean()),
                         float(pred[sel].mean()), int(sel.sum())))
    return rows


def evaluate_carbon(pred: CarbonPrediction, carbon_ref: Grid, test_region, exclude=None,
                    thresholds: HcsThresholds = HcsThresholds(), saturation_slope=0.5) -> EvalReport:
    """Metrics, reference-decile saturation diagnostic and HCS confusion on the test region.

    ``test_region`` is a :class:`RegionSplit` (its test band is used) or a boolean
    pixel mask. The top-decile slope compares how much the mean prediction rises
    between the two upper reference deciles relative to the reference itself;
    below ``saturation_slope`` the predictor is reported as saturated.
    """
    mean = pred.mean
    if not mean.aligned_with(carbon_ref):
        raise ValueError("prediction and reference are not co-registered")
    valid = _valid_mask(mean, carbon_ref, exclude)
    if isinstance(test_region, RegionSplit):
        valid &= test_region.columns("test", mean.width)[None, :]
    else:
        valid &= np.asarray(test_region, dtype=bool)
    if not valid.any():
        raise ValueError("empty test region")
    p = mean.values[0].astype(np.float64)[valid]
    r = carbon_ref.values[0].astype(np.float64)[valid]
    metrics = regression_metrics(p, r)
    dec = saturation_deciles(p, r)
    slope = float("nan")
    if len(dec) >= 2 and dec[-1][2] > dec[-2][2]:
        slope = (dec[-1][3] - dec[-2][3]) / (dec[-1][2] - dec[-2][2])
    pc = classify_carbon(p, thresholds)
    rc = classify_carbon(r, thresholds)
    cm6 = confusion(pc, rc, list(range(6)))
    cm6.labels = list(CARBON_LABELS)
    cm2 = confusion(binary_collapse(pc), binary_collapse(rc), [int(Binary.OLS), int(Binary.HCS)])
    cm2.labels = ["OLS", "HCS"]
    return EvalReport(metrics, dec, slope, bool(slope < saturation_slope), cm6, cm2)
