import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcsmap.grid import (GeoTransform, Grid, bilinear_resample, extract_patch, iterate_tiles,
                         nearest_resample, reflect_index, upsample_bands)
from hcsmap.io import grid_from_bytes, grid_to_bytes, read_grid, write_grid


def make_grid(values, pixel_size=10.0, mask=None):
    return Grid(values, GeoTransform(500.0, 9000.0, pixel_size), mask)


def test_grid_is_immutable():
    g = make_grid(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        g.values[0, 0, 0] = 1.0
    assert g.shape == (1, 2, 3)
    assert g.valid.all()


def test_mask_shape_checked():
    with pytest.raises(ValueError):
        make_grid(np.zeros((2, 3)), mask=np.zeros((3, 2), dtype=bool))


def test_geotransform_roundtrip():
    t = GeoTransform(100.0, 2000.0, 10.0)
    assert t.map(3, 4) == (130.0, 1960.0)
    assert t.center(0, 0) == (105.0, 1995.0)
    assert t.inverse_map(130.0, 1960.0) == (3.0, 4.0)
    with pytest.raises(ValueError):
        GeoTransform(0, 0, 0)


def test_window_keeps_georeference():
    g = make_grid(np.arange(20.0).reshape(4, 5))
    w = g.window(1, 3, 2, 5)
    assert w.shape == (1, 2, 3)
    assert w.transform.map(0, 0) == g.transform.map(2, 1)
    np.testing.assert_array_equal(w.values[0], g.values[0, 1:3, 2:5])


def test_bilinear_hand_values():
    # 2x2 -> 4x4 at half the pixel size; output centers sit at -0.25, 0.25, 0.75, 1.25
    # in source pixel units, and the edges extrapolate along the source gradient.
    g = make_grid(np.array([[0.0, 1.0], [2.0, 3.0]]))
    out = bilinear_resample(g, 5.0)
    expected = np.array([
        [-0.75, -0.25, 0.25, 0.75],
        [0.25, 0.75, 1.25, 1.75],
        [1.25, 1.75, 2.25, 2.75],
        [2.25, 2.75, 3.25, 3.75],
    ])
    np.testing.assert_array_equal(out.values[0], expected)
    assert out.transform.pixel_size == 5.0
    assert out.transform.origin_x == g.transform.origin_x


def test_bilinear_output_size_rounds_extent():
    g = make_grid(np.zeros((7, 9)))
    out = bilinear_resample(g, 20.0)
    assert (out.height, out.width) == (4, 4)  # 3.5 -> 4, 4.5 -> 4 (banker's rounding)
    out = bilinear_resample(g, 3.0)
    assert (out.height, out.width) == (23, 30)


def test_bilinear_identity():
    v = np.random.default_rng(0).normal(size=(2, 6, 5))
    g = make_grid(v)
    out = bilinear_resample(g, 10.0)
    np.testing.assert_array_equal(out.values, g.values)


def test_bilinear_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        bilinear_resample(make_grid(np.zeros((1, 0, 3))), 5.0)


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), c=st.floats(-50, 50), target=st.floats(2.5, 40))
def test_bilinear_preserves_constants(h, w, c, target):
    c = float(np.float32(c))
    out = bilinear_resample(make_grid(np.full((h, w), c)), target)
    assert np.all(out.values == np.float32(c))


@settings(max_examples=60, deadline=None)
@given(h=st.integers(2, 10), w=st.integers(2, 10), a=st.integers(-2, 2),
       b=st.sampled_from([-0.25, -0.125, 0.0, 0.125, 0.25]),
       c=st.sampled_from([-0.25, 0.0, 0.125, 0.25]),
       target=st.sampled_from([2.0, 2.5, 4.0, 5.0, 7.5, 10.0, 15.0, 20.0, 25.0]))
def test_bilinear_reproduces_affine_fields(h, w, a, b, c, target):
    ps = 10.0
    g = make_grid(np.zeros((h, w)), pixel_size=ps)
    x0, y0 = g.transform.origin_x, g.transform.origin_y

    def field(x, y):
        # dyadic slopes keep the source exact in float32 and |field| < 8, so the
        # float32 output rounding stays below 5e-7
        return a + b * (x - x0) / ps + c * (y0 - y) / ps

    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    xs, ys = g.transform.center(cols, rows)
    src = g.with_values(field(xs, ys))
    out = bilinear_resample(src, target)
    oc, orow = np.meshgrid(np.arange(out.width), np.arange(out.height))
    ox, oy = out.transform.center(oc, orow)
    np.testing.assert_allclose(out.values[0], field(ox, oy), rtol=0, atol=1e-6)


def test_bilinear_nodata_propagates_only_with_weight():
    v = np.arange(16.0).reshape(4, 4)
    m = np.zeros((4, 4), dtype=bool)
    m[0, 0] = True
    g = make_grid(v, mask=m)
    same = bilinear_resample(g, 10.0)
    np.testing.assert_array_equal(same.mask, m)  # zero-weight neighbours do not leak
    coarse = bilinear_resample(g, 20.0)
    # output (0,0) sits at source (0.5, 0.5), which touches the masked pixel
    assert coarse.mask[0, 0]
    assert not coarse.mask[1, 1]


def test_nearest_resample_keeps_categories():
    v = np.array([[0, 1], [1, 0]], dtype=float)
    out = nearest_resample(make_grid(v, pixel_size=100.0), 10.0)
    assert out.shape == (1, 20, 20)
    assert set(np.unique(out.values)) <= {0.0, 1.0}
    assert out.values[0, 0, 0] == 0 and out.values[0, 0, 19] == 1 and out.values[0, 19, 0] == 1


def test_upsample_bands_recovers_affine_native_field():
    # a 20 m band delivered block-replicated on the 10 m grid
    native = np.add.outer(np.arange(4.0) * 2, np.arange(5.0))  # affine on the 20 m lattice
    replicated = np.kron(native, np.ones((2, 2)))
    fine = np.random.default_rng(1).normal(size=(8, 10))
    g = make_grid(np.stack([fine, replicated]))
    out = upsample_bands(g, [10, 20])
    np.testing.assert_array_equal(out.values[0], g.values[0])
    cols, rows = np.meshgrid(np.arange(10), np.arange(8))
    # 10 m centers in 20 m pixel-center units: (i + 0.5) / 2 - 0.5
    expected = 2 * ((rows + 0.5) / 2 - 0.5) + ((cols + 0.5) / 2 - 0.5)
    np.testing.assert_allclose(out.values[1], expected, atol=1e-6)


def test_upsample_bands_constant_and_errors():
    g = make_grid(np.full((3, 12, 12), 0.25))
    out = upsample_bands(g, [10, 20, 60])
    assert np.all(out.values == np.float32(0.25))
    with pytest.raises(ValueError):
        upsample_bands(g, [10, 15, 20])
    with pytest.raises(ValueError):
        upsample_bands(g, [10, 20])


def test_reflect_index_matches_numpy_pad():
    n = 5
    idx = np.arange(-7, n + 7)
    ref = np.pad(np.arange(n), 7, mode="reflect")
    np.testing.assert_array_equal(reflect_index(idx, n), ref)


def test_extract_patch_reflects_at_corner():
    v = np.random.default_rng(2).normal(size=(3, 9, 11))
    g = make_grid(v)
    patch, oob = extract_patch(g, 0, 1, 7)
    padded = np.pad(g.values, ((0, 0), (3, 3), (3, 3)), mode="reflect")
    np.testing.assert_array_equal(patch, padded[:, 1:8, 0:7].transpose(1, 2, 0))
    assert oob.shape == (7, 7)
    assert oob[:, :3].all() and oob[:2].all()
    assert not oob[2:, 3:].any()


def test_extract_patch_errors():
    g = make_grid(np.zeros((5, 5)))
    with pytest.raises(ValueError):
        extract_patch(g, 2, 2, 4)
    with pytest.raises(ValueError):
        extract_patch(g, 5, 0, 3)


def test_iterate_tiles_brute_force_coverage():
    h, w, tile, overlap = 257, 91, 64, 8
    wins = iterate_tiles((h, w), tile, overlap)
    owner = np.zeros((h, w), dtype=int)
    for win in wins:
        owner[win.core_row0:win.core_row1, win.core_col0:win.core_col1] += 1
        # window is the core grown by the overlap, clipped to the grid
        assert win.row0 == max(win.core_row0 - overlap, 0)
        assert win.col1 == min(win.core_col1 + overlap, w)
        assert win.row1 - win.row0 <= tile and win.col1 - win.col0 <= tile
    assert np.all(owner == 1)


def test_iterate_tiles_core_values_match_whole_grid():
    # a 5x5 box filter has radius 2, within the overlap of 3
    rng = np.random.default_rng(3)
    a = rng.normal(size=(40, 33))

    def box(x):
        p = np.pad(x, 2, mode="reflect")
        return sum(p[i:i + x.shape[0], j:j + x.shape[1]] for i in range(5) for j in range(5))

    full = box(a)
    out = np.zeros_like(a)
    for win in iterate_tiles((40, 33), 16, 3):
        y = box(a[win.row0:win.row1, win.col0:win.col1])
        out[win.core_row0:win.core_row1, win.core_col0:win.core_col1] = y[win.core_in_window]
    np.testing.assert_allclose(out, full, atol=1e-12)


def test_iterate_tiles_rejects_small_tiles():
    with pytest.raises(ValueError):
        iterate_tiles((10, 10), 16, 8)


def test_grd1_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    mask = rng.random((7, 13)) < 0.3
    g = Grid(rng.normal(size=(3, 7, 13)), GeoTransform(1.5, 99.0, 10.0), mask, ("a", "b", "c"))
    data = grid_to_bytes(g)
    assert data.startswith(b"GRD1\n")
    back = grid_from_bytes(data)
    np.testing.assert_array_equal(back.values, g.values)
    np.testing.assert_array_equal(back.mask, g.mask)
    assert back.transform == g.transform and back.band_names == g.band_names
    assert grid_to_bytes(back) == data
    write_grid(tmp_path / "g.grd", g)
    assert grid_to_bytes(read_grid(tmp_path / "g.grd")) == data
    assert not list(tmp_path.glob("*.tmp"))


def test_grd1_rejects_other_formats():
    with pytest.raises(ValueError):
        grid_from_bytes(b"NNP1\n{}\n")


def test_bilinear_30m_to_10m_constant_and_plane():
    out = bilinear_resample(make_grid(np.full((3, 3), 7.0), pixel_size=30.0), 10.0)
    assert out.shape == (1, 9, 9)
    assert np.all(out.values == 7.0)
    # f = 2x + 3y with map coordinates measured in hectometres
    src = make_grid(np.zeros((3, 3)), pixel_size=30.0)
    def plane(g):
        cols, rows = np.meshgrid(np.arange(g.width) + 0.5, np.arange(g.height) + 0.5)
        x, y = g.transform.map(cols, rows)
        return 2 * (x - 500.0) / 100.0 + 3 * (9000.0 - y) / 100.0
    src = src.with_values(plane(src))
    out = bilinear_resample(src, 10.0)
    np.testing.assert_allclose(out.values[0], plane(out), atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.floats(-50, 50), st.sampled_from([2.5, 5.0, 7.0, 20.0]))
def test_bilinear_commutes_with_adding_a_constant(h, w, c, target):
    vals = np.random.default_rng(h * 10 + w).random((h, w)) * 10
    a = bilinear_resample(make_grid(vals), target)
    b = bilinear_resample(make_grid(vals + c), target)
    np.testing.assert_allclose(b.values, a.values + np.float32(c), atol=1e-4)


def test_extract_patch_constant_and_column_ramp():
    const = make_grid(np.full((31, 31), 4.0))
    patch, oob = extract_patch(const, 15, 15, 15)
    assert np.all(patch == 4.0) and not oob.any()
    ramp = make_grid(np.tile(np.arange(20.0), (20, 1)))
    patch, _ = extract_patch(ramp, 10, 10, 15)
    np.testing.assert_array_equal(patch[:, :, 0], np.tile(np.arange(3.0, 18.0), (15, 1)))
    # near the right edge the columns reflect back: ... 18, 19, 18, 17 ...
    patch, oob = extract_patch(ramp, 17, 10, 15)
    assert patch[0, :, 0].tolist() == [10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 18, 17, 16, 15, 14]
    assert oob[0].tolist() == [False] * 10 + [True] * 5


def test_iterate_tiles_single_window():
    (win,) = iterate_tiles((100, 100), 100, 0)
    assert (win.row0, win.row1, win.col0, win.col1) == (0, 100, 0, 100)
    assert (win.core_row0, win.core_row1, win.core_col0, win.core_col1) == (0, 100, 0, 100)
