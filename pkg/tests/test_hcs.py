import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hcsmap.grid import GeoTransform, Grid
from hcsmap.hcs import (PALETTE, Binary, HcsClass, HcsThresholds, OverlayThresholds, binary_collapse,
                        classify_carbon, classify_grid, legend, overlay)

# class ranges in Mg C/ha, lower bound inclusive
RANGES = [(0, 15, HcsClass.OL), (15, 35, HcsClass.S), (35, 75, HcsClass.YRF),
          (75, 90, HcsClass.LDF), (90, 150, HcsClass.MDF), (150, np.inf, HcsClass.HDF)]


def test_dense_sweep_is_a_partition():
    d = np.round(np.arange(0, 300.0001, 0.01), 2)
    codes = classify_carbon(d)
    hits = np.stack([(d >= lo) & (d < hi) for lo, hi, _ in RANGES])
    assert np.all(hits.sum(axis=0) == 1)
    expected = np.array([RANGES[i][2] for i in np.argmax(hits, axis=0)])
    np.testing.assert_array_equal(codes, expected)
    b = binary_collapse(codes)
    np.testing.assert_array_equal(b == Binary.HCS, d >= 35.0)
    np.testing.assert_array_equal(b == Binary.OLS, d < 35.0)


def test_stated_examples_and_boundaries():
    assert classify_carbon(10.0) is HcsClass.OL
    assert classify_carbon(160.0) is HcsClass.HDF
    assert classify_carbon(0.0) is HcsClass.OL
    assert classify_carbon(15.0) is HcsClass.S
    assert classify_carbon(34.999) is HcsClass.S
    assert classify_carbon(35.0) is HcsClass.YRF
    assert classify_carbon(74.99) is HcsClass.YRF
    assert classify_carbon(75.0) is HcsClass.LDF
    assert classify_carbon(90.0) is HcsClass.MDF
    assert classify_carbon(150.0) is HcsClass.HDF
    assert classify_carbon(np.nan) is HcsClass.NoData


def test_negative_density_rejected():
    with pytest.raises(ValueError):
        classify_carbon(-0.1)
    with pytest.raises(ValueError):
        classify_carbon(np.array([1.0, -1.0]))


def test_thresholds_validation():
    with pytest.raises(ValueError):
        HcsThresholds((15, 35, 35, 90, 150))
    with pytest.raises(ValueError):
        HcsThresholds(hcs_cutoff=40.0)
    with pytest.raises(ValueError):
        OverlayThresholds(0.0, 0.4)


@given(st.floats(0, 1000, allow_nan=False))
def test_classify_monotone(x):
    assert classify_carbon(x) <= classify_carbon(x + 1.0)


def test_binary_collapse_of_overlays():
    assert binary_collapse(HcsClass.Urban) is Binary.Other
    assert binary_collapse(HcsClass.PlantationCoconut) is Binary.Other
    assert binary_collapse(HcsClass.NoData) is Binary.Other
    assert binary_collapse(HcsClass.S) is Binary.OLS


def grid(v, mask=None):
    return Grid(np.asarray(v, dtype=float), GeoTransform(0, 10, 10.0), mask)


def test_classify_grid_nodata():
    g = grid([[10.0, 200.0, 5.0]], np.array([[False, False, True]]))
    out = classify_grid(g)
    assert out.values[0].tolist() == [[0, 5, 9]]


def test_overlay_precedence_and_strict_thresholds():
    classes = grid([[3, 3, 3, 3, 3]])
    palm = grid([[0.2, 0.21, 0.5, 0.0, 0.5]])
    coco = grid([[0.0, 0.0, 0.5, 0.41, 0.5]])
    urban = grid([[0, 0, 0, 0, 1]])
    out = overlay(classes, palm, coco, urban)
    assert out.values[0].tolist() == [[3, 6, 6, 7, 8]]
    out = overlay(classes, palm, coco, urban, precedence=("coconut", "oil_palm", "urban"))
    assert out.values[0].tolist() == [[3, 6, 7, 7, 7]]
    with pytest.raises(ValueError):
        overlay(classes, grid([[0.0]]), coco, urban)


def test_legend_and_palette_cover_all_classes():
    lg = legend()
    assert set(lg) == {str(int(c)) for c in HcsClass}
    assert len({tuple(v) for v in PALETTE.values()}) == len(HcsClass)


def test_overlay_stated_examples_and_idempotence():
    classes = grid([[5, 5, 5, 2]])
    palm = grid([[0.3, 0.0, 0.5, 0.0]])
    coco = grid([[0.0, 0.39, 0.0, 0.9]])
    urban = grid([[0, 0, 1, 0]])
    once = overlay(classes, palm, coco, urban)
    assert once.values[0].tolist() == [[HcsClass.PlantationOilPalm, HcsClass.HDF, HcsClass.Urban,
                                        HcsClass.PlantationCoconut]]
    twice = overlay(once, palm, coco, urban)
    assert np.array_equal(twice.values, once.values)
    assert binary_collapse(HcsClass.MDF) is Binary.HCS
