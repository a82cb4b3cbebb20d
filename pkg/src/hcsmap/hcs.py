"""High-carbon-stock stratification, binary collapse and mask overlays."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .grid import Grid


class HcsClass(IntEnum):
    OL = 0
    S = 1
    YRF = 2
    LDF = 3
    MDF = 4
    HDF = 5
    PlantationOilPalm = 6
    PlantationCoconut = 7
    Urban = 8
    NoData = 9


class Binary(IntEnum):
    OLS = 0
    HCS = 1
    Other = 2


CARBON_CLASSES = (HcsClass.OL, HcsClass.S, HcsClass.YRF, HcsClass.LDF, HcsClass.MDF, HcsClass.HDF)
PLANTATIONS = (HcsClass.PlantationOilPalm, HcsClass.PlantationCoconut)

PALETTE = {
    HcsClass.OL: (230, 220, 170),
    HcsClass.S: (200, 190, 90),
    HcsClass.YRF: (170, 220, 120),
    HcsClass.LDF: (100, 190, 80),
    HcsClass.MDF: (40, 140, 50),
    HcsClass.HDF: (10, 80, 30),
    HcsClass.PlantationOilPalm: (230, 120, 40),
    HcsClass.PlantationCoconut: (240, 180, 60),
    HcsClass.Urban: (200, 30, 30),
    HcsClass.NoData: (0, 0, 0),
}


@dataclass(frozen=True)
class HcsThresholds:
    breakpoints: tuple = (15.0, 35.0, 75.0, 90.0, 150.0)
    hcs_cutoff: float = 35.0

    def __post_init__(self):
        b = np.asarray(self.breakpoints, dtype=float)
        if b.size != 5 or np.any(np.diff(b) <= 0):
            raise ValueError("breakpoints must be 5 strictly increasing values")
        if self.hcs_cutoff not in self.breakpoints:
            raise ValueError("hcs_cutoff must be one of the breakpoints")


@dataclass(frozen=True)
class OverlayThresholds:
    oil_palm_density: float = 0.2
    coconut_density: float = 0.4

    def __post_init__(self):
        if not (self.oil_palm_density > 0 and self.coconut_density > 0):
            raise ValueError("overlay thresholds must be positive")


def classify_carbon(density, t: HcsThresholds = HcsThresholds()):
    """Carbon density (Mg C/ha) to class codes on lower-inclusive intervals.

    Accepts a scalar or an array; NaN means nodata and maps to ``NoData``.
    """
    d = np.asarray(density, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("negative carbon density")
    codes = np.searchsorted(np.asarray(t.breakpoints, dtype=np.float64), d, side="right")
    codes = np.where(np.isnan(d), int(HcsClass.NoData), codes)
    if codes.ndim == 0:
        return HcsClass(int(codes))
    return codes.astype(np.uint8)


def classify_grid(carbon: Grid, t: HcsThresholds = HcsThresholds()) -> Grid:
    d = np.where(carbon.mask, np.nan, carbon.values[0].astype(np.float64))
    return Grid(classify_carbon(d, t).astype(np.float32), carbon.transform, carbon.mask, ("hcs_class",))


_BINARY = np.full(len(HcsClass), int(Binary.Other), dtype=np.uint8)
_BINARY[[HcsClass.OL, HcsClass.S]] = Binary.OLS
_BINARY[[HcsClass.YRF, HcsClass.LDF, HcsClass.MDF, HcsClass.HDF]] = Binary.HCS


def binary_collapse(c):
    """OL, S -> OLS; YRF..HDF -> HCS; overlays and NoData -> Other."""
    arr = np.asarray(c)
    out = _BINARY[arr.astype(np.intp)]
    if out.ndim == 0:
        return Binary(int(out))
    return out


def overlay(carbon_classes: Grid, palm_density: Grid, coconut_density: Grid, urban: Grid,
            t: OverlayThresholds = OverlayThresholds(),
            precedence=("urban", "oil_palm", "coconut")) -> Grid:
    """Replace carbon classes by plantation and urban masks.

    A plantation applies where its tree density strictly exceeds the threshold;
    urban applies where the urban layer is non-zero. Earlier entries of
    ``precedence`` win.
    """
    for g in (palm_density, coconut_density, urban):
        if not g.aligned_with(carbon_classes):
            raise ValueError("overlay grids are not aligned with the class grid")
    codes = carbon_classes.values[0].astype(np.intp).copy()
    layers = {
        "urban": ((urban.values[0] != 0) & ~urban.mask, HcsClass.Urban),
        "oil_palm": ((palm_density.values[0] > t.oil_palm_density) & ~palm_density.mask,
                     HcsClass.PlantationOilPalm),
        "coconut": ((coconut_density.values[0] > t.coconut_density) & ~coconut_density.mask,
                    HcsClass.PlantationCoconut),
    }
    for name in reversed(precedence):
        m, cls = layers[name]
        codes[m] = int(cls)
    mask = codes == int(HcsClass.NoData)
    return Grid(codes.astype(np.float32), carbon_classes.transform, mask, ("hcs_class",))


def legend():
    return {str(int(c)): {"name": c.name, "rgb": list(PALETTE[c])} for c in HcsClass}
