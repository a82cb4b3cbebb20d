import numpy as np
import pytest

from hcsmap.canopy import LIDAR
from hcsmap.hcs import classify_carbon
from hcsmap.synth import (SCL_NOT_VEGETATED, WorldConfig, allometry, band_response, gen_footprints,
                          gen_images, gen_overlays, gen_world, height_field, noise_floor,
                          tile_windows, value_noise)


def test_world_is_deterministic():
    cfg = WorldConfig(seed=5, extent=64)
    a, b = gen_world(cfg), gen_world(cfg)
    for ga, gb in zip(a, b):
        assert np.array_equal(ga.values, gb.values)
    c = gen_world(WorldConfig(seed=6, extent=64))
    assert not np.array_equal(a.height.values, c.height.values)
    fa, fb = gen_footprints(a.height, cfg), gen_footprints(b.height, cfg)
    assert fa == fb
    ia, ib = gen_images(a.height, cfg, 2), gen_images(b.height, cfg, 2)
    for (x, y), (u, v) in zip(ia, ib):
        assert np.array_equal(x.values, u.values) and np.array_equal(y.values, v.values)


def test_height_range_and_nonvegetated():
    w = gen_world(WorldConfig(seed=1, extent=128))
    h = w.height.values[0]
    assert h.min() == 0.0 and h.max() <= 55.0
    bare = w.scene_class.values[0] == SCL_NOT_VEGETATED
    assert abs(bare.mean() - 0.08) < 0.01
    assert np.all(h[bare] == 0)
    assert set(np.unique(w.zones.values)) == {1, 2, 3, 4}


def test_variogram_efolding_length():
    # empirical 1/e lag of the correlation function within 25 % of the configured length
    cfg = WorldConfig(seed=2, extent=512, correlation_length=16.0)
    v = height_field(cfg)
    v = (v - v.mean()) / v.std()
    lags = np.arange(1, 60)
    rho = np.array([0.5 * (np.mean(v[:, k:] * v[:, :-k]) + np.mean(v[k:] * v[:-k])) for k in lags])
    efold = lags[np.argmax(rho < np.exp(-1))]
    assert abs(efold - 16.0) <= 0.25 * 16.0


def test_value_noise_bounds():
    v = value_noise((40, 50), 7.0, np.random.default_rng(0))
    assert v.shape == (40, 50) and v.min() >= 0 and v.max() <= 1


def test_carbon_consistency_without_noise():
    cfg = WorldConfig(seed=3, extent=64, carbon_noise_sd=0.0)
    w = gen_world(cfg)
    h = w.height.values[0].astype(np.float64)
    c = w.carbon.values[0].astype(np.float64)
    np.testing.assert_allclose(c, 1.7 * h ** 1.2, rtol=1e-6, atol=1e-5)
    # class as a function of height via the inverse allometry
    cuts = (np.array([15, 35, 75, 90, 150]) / 1.7) ** (1 / 1.2)
    by_height = np.searchsorted(cuts, h, side="right")
    away = np.min(np.abs(h[..., None] - cuts), axis=-1) > 1e-3
    np.testing.assert_array_equal(classify_carbon(c)[away], by_height[away])


def test_all_six_classes_occur():
    w = gen_world(WorldConfig(seed=0, extent=256))
    assert set(np.unique(classify_carbon(w.carbon.values[0]))) == {0, 1, 2, 3, 4, 5}


def test_footprint_count_binomial():
    cfg = WorldConfig(seed=4, extent=256, footprint_density=300)
    fps = gen_footprints(gen_world(cfg).height, cfg)
    n = 256 * 256
    p = 300 * 1e-4
    assert abs(len(fps) - n * p) <= 3 * np.sqrt(n * p * (1 - p))
    assert all(f.source == LIDAR and f.canopy_top_height >= 0 for f in fps)


def test_footprint_labels_noise_and_tiles():
    cfg = WorldConfig(seed=7, extent=200, jitter=0, label_noise_sd=2.0, tile_size=64,
                      footprint_density=2000, nonveg_fraction=0.0)
    w = gen_world(cfg)
    fps = gen_footprints(w.height, cfg)
    tiles = tile_windows(w.height, 64)
    assert len(tiles) == 16
    resid = []
    for f in fps:
        true = tiles[f.tile_id].values[0, f.center_row, f.center_col]
        if true > 10:  # away from the clamp at zero
            resid.append(f.canopy_top_height - true)
    resid = np.array(resid)
    assert abs(resid.std() - 2.0) < 0.1 and abs(resid.mean()) < 0.1


def test_images_and_clouds():
    cfg = WorldConfig(seed=8, extent=128, cloud_fraction=0.2)
    w = gen_world(cfg)
    acqs = gen_images(w.height, cfg, 3)
    assert len(acqs) == 3
    img, cloud = acqs[0]
    assert img.bands == 12 and cloud.bands == 1
    p = cloud.values[0]
    assert p.min() >= 0 and p.max() <= 1
    clear = p == 0
    np.testing.assert_allclose(img.values[:, clear], band_response(w.height.values[0])[:, clear], atol=0.06)
    with pytest.raises(ValueError):
        gen_images(w.height, cfg, 0)


def test_overlays_and_noise_floor():
    cfg = WorldConfig(seed=9, extent=100)
    palm, coco, urban = gen_overlays(cfg)
    assert palm.shape == coco.shape == urban.shape == (1, 100, 100)
    assert set(np.unique(urban.values)) <= {0.0, 1.0}
    assert 0.03 < np.mean(palm.values > 0.2) < 0.12
    assert noise_floor(cfg) == {"label_noise_sd": 2.0, "carbon_noise_sd": 10.0}


def test_config_validation():
    with pytest.raises(ValueError):
        WorldConfig(cloud_fraction=1.5)
    with pytest.raises(ValueError):
        WorldConfig(extent=0)
    assert allometry(np.array([0.0, 1.0]), 2.0, 3.0).tolist() == [0.0, 2.0]


def test_identity_allometry_gives_carbon_equal_to_height():
    w = gen_world(WorldConfig(seed=2, extent=48, allometry_a=1.0, allometry_b=1.0, carbon_noise_sd=0.0))
    np.testing.assert_array_equal(w.carbon.values, w.height.values)


def test_cloud_free_and_noise_free_acquisitions():
    w = gen_world(WorldConfig(seed=3, extent=64))
    (_, cloud), = gen_images(w.height, WorldConfig(seed=3, extent=64, cloud_fraction=0.0), 1)
    assert not cloud.values.any()
    cfg = WorldConfig(seed=3, extent=64, texture_noise_sd=0.0)
    (a, ca), (b, cb) = gen_images(w.height, cfg, 2)
    clear = (ca.values[0] == 0) & (cb.values[0] == 0)
    assert clear.any()
    np.testing.assert_array_equal(a.values[:, clear], b.values[:, clear])


def test_acquisitions_share_the_height_signal():
    cfg = WorldConfig(seed=4, extent=128)
    w = gen_world(cfg)
    (a, ca), (b, cb) = gen_images(w.height, cfg, 2)
    clear = (ca.values[0] == 0) & (cb.values[0] == 0)
    for band in range(12):
        assert np.corrcoef(a.values[band][clear], b.values[band][clear])[0, 1] > 0.9


def test_dense_noise_free_footprints_equal_height():
    cfg = WorldConfig(seed=6, extent=64, tile_size=32, footprint_density=10_000,
                      label_noise_sd=0.0, jitter=0)
    w = gen_world(cfg)
    fps = gen_footprints(w.height, cfg)
    assert len(fps) == 64 * 64
    tiles = tile_windows(w.height, 32)
    for f in fps:
        assert f.canopy_top_height == tiles[f.tile_id].values[0, f.center_row, f.center_col]
