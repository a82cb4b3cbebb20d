"""Pipeline stages on an output directory, driven by one JSON config.

Directory layout under the output root::

    world/      synthetic truth, imagery, footprints (synth)
    canopy/     dataset, model, per-acquisition predictions, composite height
    carbon/     ensemble checkpoints, carbon mean and variance
    hcs/        class grids, legend, colour preview
    stats/      zonal statistics and height box plots
    eval/       metrics, confusion matrices, saturation deciles

Every stage writes ``<stage dir>/<command>.manifest.json`` recording the config
hash, seed, input and output hashes and the package version.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .canopy import (FootprintSample, TrainConfig, build_dataset, composite, predict_dense,
                     select_least_cloudy, train_canopy)
from .carbon import (CarbonConfig, CarbonEnsemble, CarbonPrediction, evaluate_carbon,
                     geographic_split, predict_carbon, train_carbon_ensemble)
from .evalstats import (regression_metrics, grouped_boxplot, write_boxplots, write_confusion,
                        write_metrics, write_zones, zonal_stats)
from .hcs import (PALETTE, CARBON_CLASSES, HcsThresholds, OverlayThresholds, classify_grid,
                  classify_carbon, legend, overlay)
from .io import (atomic_write, fpd_from_bytes, fpd_to_bytes, read_grid, sha256_file,
                 write_csv, write_grid, write_json, write_pgm, write_ppm)
from .nn import load_model, save_model
from .nn.gradcheck import standard_checks
from .synth import WorldConfig, gen_footprints, gen_images, gen_overlays, gen_world, noise_floor, tile_windows

OUT_ENV = "HCSMAP_OUT"
GRAD_CHECK_SEED = 1
GRAD_CHECK_TOL = 1e-4


class ConfigError(ValueError):
    pass


def _from_dict(cls, data, section):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section!r}: {e}") from None


@dataclass
class HcsSection:
    breakpoints: list = field(default_factory=lambda: [15.0, 35.0, 75.0, 90.0, 150.0])
    hcs_cutoff: float = 35.0
    oil_palm_density: float = 0.2
    coconut_density: float = 0.4

    def thresholds(self):
        return HcsThresholds(tuple(float(b) for b in self.breakpoints), float(self.hcs_cutoff))

    def overlays(self):
        return OverlayThresholds(self.oil_palm_density, self.coconut_density)


@dataclass
class RunSection:
    acquisitions: int = 12
    composite_k: int = 10
    predict_tile: int = 256
    carbon_input: str = "composite"  # or "truth"

    def __post_init__(self):
        if self.carbon_input not in ("composite", "truth"):
            raise ValueError("carbon_input must be 'composite' or 'truth'")


@dataclass
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    root: str = "out"
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    carbon: CarbonConfig = field(default_factory=CarbonConfig)
    hcs: HcsSection = field(default_factory=HcsSection)
    run: RunSection = field(default_factory=RunSection)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        sections = {"world": WorldConfig, "train": TrainConfig, "carbon": CarbonConfig,
                    "hcs": HcsSection, "run": RunSection}
        unknown = set(data) - set(sections) - {"seed", "threads", "root"}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        kw = {k: _from_dict(c, data.get(k), k) for k, c in sections.items()}
        cfg = cls(seed=int(data.get("seed", 0)), threads=int(data.get("threads", 1)),
                  root=str(data.get("root", "out")), **kw)
        return cfg

    @classmethod
    def loads(cls, text):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config: {e}") from None
        return cls.loads(text)

    def to_dict(self):
        return asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def hash(self):
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def apply_seed(self, seed):
        self.seed = seed
        self.world.seed = seed
        self.train.seed = seed

    def carbon_seeds(self):
        return [self.seed * 10 + k for k in range(5)]


class Pipeline:
    def __init__(self, cfg: PipelineConfig, root=None):
        self.cfg = cfg
        self.root = Path(root or os.environ.get(OUT_ENV) or cfg.root)

    def path(self, *parts):
        return self.root.joinpath(*parts)

    def _manifest(self, command, stage, inputs, outputs, extra=None):
        def rel(p):
            return str(Path(p).relative_to(self.root))

        man = {
            "command": command,
            "version": __version__,
            "seed": self.cfg.seed,
            "config_hash": self.cfg.hash(),
            "config": self.cfg.to_dict(),
            "inputs": {rel(p): sha256_file(p) for p in sorted(map(str, inputs))},
            "outputs": {rel(p): sha256_file(p) for p in sorted(map(str, outputs))},
        }
        if extra:
            man.update(extra)
        write_json(self.path(stage, f"{command}.manifest.json"), man)
        return man

    # --- world -----------------------------------------------------------
    def acquisitions(self):
        n = self.cfg.run.acquisitions
        return [(read_grid(self.path("world", "images", f"acq_{k}.grd")),
                 read_grid(self.path("world", "images", f"cloud_{k}.grd"))) for k in range(n)]

    def synth(self):
        wc = self.cfg.world
        world = gen_world(wc)
        palm, coco, urban = gen_overlays(wc)
        out = []
        for name, g in (("height", world.height), ("carbon", world.carbon), ("scene", world.scene_class),
                        ("zones", world.zones), ("palm", palm), ("coconut", coco), ("urban", urban)):
            out.append(write_grid(self.path("world", f"{name}.grd"), g))
        for k, (img, cloud) in enumerate(gen_images(world.height, wc, self.cfg.run.acquisitions)):
            out.append(write_grid(self.path("world", "images", f"acq_{k}.grd"), img))
            out.append(write_grid(self.path("world", "images", f"cloud_{k}.grd"), cloud))
        fps = gen_footprints(world.height, wc)
        recs = [(f.tile_id, f.center_col, f.center_row, f.canopy_top_height, f.source) for f in fps]
        out.append(atomic_write(self.path("world", "footprints.fpd"),
                                fpd_to_bytes(recs, None, sorted({f.tile_id for f in fps}), wc.to_dict())))
        out.append(write_json(self.path("world", "world.json"),
                              {"world": wc.to_dict(), "noise_floor": noise_floor(wc),
                               "n_footprints": len(fps)}))
        out.append(write_pgm(self.path("world", "height.pgm"), world.height))
        self._manifest("synth", "world", [], out)

    def footprints(self):
        _, recs, _ = fpd_from_bytes(self.path("world", "footprints.fpd").read_bytes())
        return [FootprintSample(int(t), int(c), int(r), float(h), s) for t, c, r, h, s in recs]

    def training_tiles(self):
        """Per tile, the acquisition with the lowest mean cloud probability inside it."""
        ts = self.cfg.world.tile_size
        acqs = self.acquisitions()
        scene = tile_windows(read_grid(self.path("world", "scene.grd")), ts)
        per_acq = [(tile_windows(img, ts), tile_windows(cl, ts)) for img, cl in acqs]
        tiles = {}
        for tid in sorted(scene):
            best = min(range(len(acqs)), key=lambda k: (float(per_acq[k][1][tid].values.mean()), k))
            tiles[tid] = (per_acq[best][0][tid], per_acq[best][1][tid], scene[tid])
        return tiles

    # --- stage 1 ---------------------------------------------------------
    def train_canopy(self):
        tc = self.cfg.train
        ds = build_dataset(self.training_tiles(), self.footprints(), tc)
        ds_path = ds.save(self.path("canopy", "dataset.fpd"))
        res = train_canopy(ds, tc)
        meta = {"best_iteration": res.best_iteration, "best_val_rmse": res.best_val_rmse,
                "train_tiles": res.train_ids, "val_tiles": res.val_ids}
        m_path = save_model(self.path("canopy", "model.nnp"), res.model, res.optimizer, meta)
        t_path = write_csv(self.path("canopy", "trace.csv"), ["iteration", "train_mse", "val_rmse"], res.trace)
        ins = [self.path("world", "footprints.fpd")] + [
            self.path("world", "images", f"{p}_{k}.grd") for k in range(self.cfg.run.acquisitions) for p in ("acq", "cloud")]
        self._manifest("train-canopy", "canopy", ins, [ds_path, m_path, t_path], {"training": meta})

    def predict(self):
        model, _, _ = load_model(self.path("canopy", "model.nnp"))
        out, ins = [], [self.path("canopy", "model.nnp")]
        for k, (img, _) in enumerate(self.acquisitions()):
            ins.append(self.path("world", "images", f"acq_{k}.grd"))
            out.append(write_grid(self.path("canopy", f"pred_{k}.grd"),
                                  predict_dense(model, img, self.cfg.run.predict_tile)))
        self._manifest("predict", "canopy", ins, out)

    def composite(self):
        n = self.cfg.run.acquisitions
        items = [(read_grid(self.path("canopy", f"pred_{k}.grd")),
                  read_grid(self.path("world", "images", f"cloud_{k}.grd")), k) for k in range(n)]
        chosen = select_least_cloudy([(p, c) for p, c, _ in items], min(self.cfg.run.composite_k, n))
        ids = [k for p, c, k in items if any(p is q for q, _ in chosen)]
        height = composite([p for p, _ in chosen], [c for _, c in chosen])
        out = [write_grid(self.path("canopy", "height.grd"), height),
               write_pgm(self.path("canopy", "height.pgm"), height)]
        ins = [self.path("canopy", f"pred_{k}.grd") for k in ids]
        self._manifest("composite", "canopy", ins, out, {"acquisitions_used": ids})

    # --- stage 2 ---------------------------------------------------------
    def carbon_input(self):
        if self.cfg.run.carbon_input == "truth":
            return self.path("world", "height.grd")
        return self.path("canopy", "height.grd")

    def plantation_mask(self):
        palm = read_grid(self.path("world", "palm.grd"))
        return palm.values[0] > self.cfg.hcs.oil_palm_density

    def train_carbon(self):
        h_path = self.carbon_input()
        height = read_grid(h_path)
        ref = read_grid(self.path("world", "carbon.grd"))
        split = geographic_split(height.width)
        ens = train_carbon_ensemble(height, ref, split, self.cfg.carbon_seeds(), self.cfg.carbon,
                                    exclude=self.plantation_mask())
        d = ens.save(self.path("carbon", "ensemble"))
        outs = sorted(d.iterdir())
        self._manifest("train-carbon", "carbon", [h_path, self.path("world", "carbon.grd")], outs)

    def predict_carbon(self):
        ens = CarbonEnsemble.load(self.path("carbon", "ensemble"))
        h_path = self.carbon_input()
        pred = predict_carbon(ens, read_grid(h_path), self.cfg.run.predict_tile)
        out = [write_grid(self.path("carbon", "mean.grd"), pred.mean),
               write_grid(self.path("carbon", "variance.grd"), pred.variance),
               write_pgm(self.path("carbon", "mean.pgm"), pred.mean)]
        ins = [h_path] + sorted(self.path("carbon", "ensemble").iterdir())
        self._manifest("predict-carbon", "carbon", ins, out)

    # --- stratification and statistics ---------------------------------
    def classify(self):
        hc = self.cfg.hcs
        mean = read_grid(self.path("carbon", "mean.grd"))
        classes = classify_grid(mean, hc.thresholds())
        final = overlay(classes, read_grid(self.path("world", "palm.grd")),
                        read_grid(self.path("world", "coconut.grd")),
                        read_grid(self.path("world", "urban.grd")), hc.overlays())
        out = [write_grid(self.path("hcs", "carbon_classes.grd"), classes),
               write_grid(self.path("hcs", "classes.grd"), final),
               write_json(self.path("hcs", "legend.json"), legend()),
               write_ppm(self.path("hcs", "classes.ppm"), final.values[0], PALETTE)]
        ins = [self.path("carbon", "mean.grd")] + [self.path("world", f"{n}.grd") for n in ("palm", "coconut", "urban")]
        self._manifest("classify", "hcs", ins, out)

    def stats(self):
        classes = read_grid(self.path("hcs", "classes.grd"))
        zones = read_grid(self.path("world", "zones.grd"))
        zs = zonal_stats(classes.values[0], zones.values[0], ranked=True)
        out = [write_zones(self.path("stats", "zones.csv"), zs)]
        height = read_grid(self.path("canopy", "height.grd"))
        ref = read_grid(self.path("world", "carbon.grd"))
        ok = ~height.mask & ~ref.mask & ~self.plantation_mask()
        ref_cls = classify_carbon(ref.values[0].astype(np.float64)[ok], self.cfg.hcs.thresholds())
        names = np.array([c.name for c in CARBON_CLASSES])[ref_cls]
        box = grouped_boxplot(height.values[0][ok], names, order=[c.name for c in CARBON_CLASSES])
        out.append(write_boxplots(self.path("stats", "boxplots.csv"), box))
        ins = [self.path("hcs", "classes.grd"), self.path("world", "zones.grd"),
               self.path("canopy", "height.grd"), self.path("world", "carbon.grd")]
        self._manifest("stats", "stats", ins, [p for p in self.path("stats").iterdir() if p.suffix in (".csv", ".json") and "manifest" not in p.name])

    def evaluate(self):
        out = []
        metrics = {}
        # canopy height against footprints of the held-out tiles
        _, _, meta = load_model(self.path("canopy", "model.nnp"))
        val_tiles = set(meta.get("val_tiles", []))
        height = read_grid(self.path("canopy", "height.grd"))
        ts = self.cfg.world.tile_size
        ntx = -(-height.width // ts)
        pred, ref = [], []
        for fp in self.footprints():
            if fp.tile_id not in val_tiles:
                continue
            row = (fp.tile_id // ntx) * ts + fp.center_row
            col = (fp.tile_id % ntx) * ts + fp.center_col
            if not height.mask[row, col]:
                pred.append(float(height.values[0, row, col]))
                ref.append(fp.canopy_top_height)
        if ref:
            metrics["canopy_height_m"] = regression_metrics(pred, ref)
        # carbon on the geographic test band
        mean = read_grid(self.path("carbon", "mean.grd"))
        var = read_grid(self.path("carbon", "variance.grd"))
        cref = read_grid(self.path("world", "carbon.grd"))
        rep = evaluate_carbon(CarbonPrediction(mean, var), cref, geographic_split(mean.width),
                              exclude=self.plantation_mask(), thresholds=self.cfg.hcs.thresholds())
        metrics["carbon_mg_c_ha"] = rep.metrics
        write_metrics(self.path("eval", "metrics.csv"), metrics)
        write_confusion(self.path("eval", "confusion.csv"), rep.confusion6)
        write_confusion(self.path("eval", "confusion_binary.csv"), rep.confusion2)
        write_csv(self.path("eval", "deciles.csv"), ["ref_lo", "ref_hi", "mean_ref", "mean_pred", "count"],
                  rep.deciles)
        write_json(self.path("eval", "report.json"), rep.to_dict())
        out = [p for p in sorted(self.path("eval").iterdir()) if "manifest" not in p.name]
        ins = [self.path("canopy", "height.grd"), self.path("carbon", "mean.grd"), self.path("world", "carbon.grd")]
        self._manifest("eval", "eval", ins, out)
        return metrics, rep

    def grad_check(self):
        return standard_checks(GRAD_CHECK_SEED)


COMMANDS = {
    "synth": Pipeline.synth,
    "train-canopy": Pipeline.train_canopy,
    "predict": Pipeline.predict,
    "composite": Pipeline.composite,
    "train-carbon": Pipeline.train_carbon,
    "predict-carbon": Pipeline.predict_carbon,
    "classify": Pipeline.classify,
    "stats": Pipeline.stats,
    "eval": Pipeline.evaluate,
    "grad-check": Pipeline.grad_check,
}
