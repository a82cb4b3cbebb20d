"""Regression metrics, confusion matrices, box-plot summaries and zonal statistics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .hcs import CARBON_CLASSES, PLANTATIONS, HcsClass, binary_collapse, Binary
from .io import write_csv, write_json

PIXEL_AREA_HA = 0.01  # 10 m x 10 m


@dataclass
class RegressionMetrics:
    rmse: float
    mae: float
    me: float
    count: int

    def to_dict(self):
        return asdict(self)


def regression_metrics(pred, ref, valid=None) -> RegressionMetrics:
    """RMSE, MAE and mean error (pred - ref; negative means underestimation)."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError("shape mismatch")
    valid = np.ones(pred.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    d = (pred - ref)[valid]
    if d.size == 0:
        raise ValueError("no valid pixels")
    return RegressionMetrics(float(np.sqrt(np.mean(d * d))), float(np.mean(np.abs(d))),
                             float(np.mean(d)), int(d.size))


@dataclass
class ConfusionMatrix:
    labels: list
    counts: np.ndarray  # rows: reference, columns: prediction
    row_normalized: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def accuracy(self):
        return float(np.trace(self.counts) / self.total) if self.total else float("nan")

    def to_dict(self):
        return {"labels": [str(lab) for lab in self.labels], "counts": self.counts.tolist(),
                "row_normalized": self.row_normalized.tolist(), "accuracy": self.accuracy}


def confusion(pred_classes, ref_classes, labels, valid=None) -> ConfusionMatrix:
    pred = np.asarray(pred_classes).ravel()
    ref = np.asarray(ref_classes).ravel()
    if pred.shape != ref.shape:
        raise ValueError("class grids are not co-registered")
    if valid is not None:
        keep = np.asarray(valid, dtype=bool).ravel()
        pred, ref = pred[keep], ref[keep]
    labels = list(labels)
    lookup = {lab: i for i, lab in enumerate(labels)}
    try:
        pi = np.array([lookup[v] for v in pred.tolist()], dtype=np.intp)
        ri = np.array([lookup[v] for v in ref.tolist()], dtype=np.intp)
    except KeyError as e:
        raise ValueError(f"unknown label {e.args[0]!r}") from None
    n = len(labels)
    counts = np.zeros((n, n), dtype=np.int64)
    np.add.at(counts, (ri, pi), 1)
    rows = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros((n, n)), where=rows > 0)
    return ConfusionMatrix(labels, counts, norm)


@dataclass
class BoxplotSummary:
    group: object
    median: float
    q1: float
    q3: float
    p10: float
    p90: float
    count: int


def grouped_boxplot(values, group_labels, order=None):
    """Quantile summaries per group; linear interpolation between closest ranks.

    Groups appear in ``order`` (default: sorted labels); empty groups are omitted.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    groups = np.asarray(group_labels).ravel()
    order = sorted(set(groups.tolist())) if order is None else list(order)
    out = []
    for g in order:
        v = values[groups == g]
        if v.size == 0:
            continue
        p10, q1, med, q3, p90 = np.percentile(v, [10, 25, 50, 75, 90], method="linear")
        out.append(BoxplotSummary(g, float(med), float(q1), float(q3), float(p10), float(p90), int(v.size)))
    return out


@dataclass
class ZoneStats:
    zone_id: int
    fractions: dict  # class name -> fraction of valid pixels
    hcs: float
    ols: float
    plantations: float
    count: int

    @property
    def area_ha(self):
        return self.count * PIXEL_AREA_HA


_COUNTED = [c for c in HcsClass if c != HcsClass.NoData]


def zonal_stats(class_grid, zone_grid, ranked=False):
    """Class fractions per zone over valid (non-NoData) pixels.

    Arrays or single-band grids are accepted. With ``ranked`` the zones are
    ordered by decreasing HCS fraction.
    """
    classes = np.asarray(getattr(class_grid, "values", class_grid)).reshape(-1).astype(np.intp)
    zones = np.asarray(getattr(zone_grid, "values", zone_grid)).reshape(-1).astype(np.int64)
    if classes.shape != zones.shape:
        raise ValueError("class and zone grids are not co-registered")
    out = []
    for z in np.unique(zones):
        c = classes[zones == z]
        c = c[c != int(HcsClass.NoData)]
        counts = np.bincount(c, minlength=len(HcsClass))
        n = int(c.size)
        frac = {cls.name: (counts[cls] / n if n else 0.0) for cls in _COUNTED}
        b = binary_collapse(c) if n else np.zeros(0, dtype=np.uint8)
        hcs = float(np.mean(b == Binary.HCS)) if n else 0.0
        ols = float(np.mean(b == Binary.OLS)) if n else 0.0
        plant = float(sum(counts[p] for p in PLANTATIONS) / n) if n else 0.0
        out.append(ZoneStats(int(z), {k: float(v) for k, v in frac.items()}, hcs, ols, plant, n))
    if ranked:
        out.sort(key=lambda s: (-s.hcs, s.zone_id))
    return out


def write_metrics(path_csv, named_metrics):
    """``named_metrics``: mapping name -> RegressionMetrics. Also writes a JSON mirror."""
    rows = [[name, m.rmse, m.mae, m.me, m.count] for name, m in named_metrics.items()]
    write_csv(path_csv, ["name", "rmse", "mae", "me", "count"], rows)
    write_json(str(path_csv)[:-4] + ".json", {k: m.to_dict() for k, m in named_metrics.items()})


def write_confusion(path_csv, cm: ConfusionMatrix):
    labels = [str(lab) for lab in cm.labels]
    rows = [[lab, *cm.counts[i].tolist()] for i, lab in enumerate(labels)]
    rows.append(["accuracy", cm.accuracy] + [""] * (len(labels) - 1))
    write_csv(path_csv, ["reference\\prediction", *labels], rows)
    write_json(str(path_csv)[:-4] + ".json", cm.to_dict())


def write_boxplots(path_csv, summaries):
    rows = [[str(s.group), s.count, s.p10, s.q1, s.median, s.q3, s.p90] for s in summaries]
    write_csv(path_csv, ["group", "count", "p10", "q1", "median", "q3", "p90"], rows)
    write_json(str(path_csv)[:-4] + ".json", [dict(asdict(s), group=str(s.group)) for s in summaries])


def write_zones(path_csv, stats):
    names = [c.name for c in _COUNTED]
    rows = [[s.zone_id, s.count, s.area_ha, s.hcs, s.ols, s.plantations, *[s.fractions[n] for n in names]]
            for s in stats]
    write_csv(path_csv, ["zone_id", "count", "area_ha", "HCS", "OLS", "Plantations", *names], rows)
    write_json(str(path_csv)[:-4] + ".json", [dict(asdict(s), area_ha=s.area_ha) for s in stats])


CARBON_LABELS = [c.name for c in CARBON_CLASSES]
