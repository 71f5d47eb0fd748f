import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nowcast.geogrid import (
    GeoGrid, GridShapeError, ResolutionRatioError, depth_to_space, pad_longitude,
    read_grid, resample, space_to_depth, write_grid,
)


def _grid(h, w, c=1, res=0.05, seed=0):
    rng = np.random.default_rng(seed)
    return GeoGrid(90.0, -180.0, res, rng.normal(size=(h, w, c)).astype(np.float32))


def test_upsample_replicates():
    g = GeoGrid(0, 0, 0.1, np.full((1, 1, 1), 5.0, dtype=np.float32))
    up = resample(g, 0.05)
    assert up.shape == (2, 2, 1)
    assert np.all(up.data == 5.0) and up.mask.all()
    assert up.res == 0.05


def test_downsample_block_mean():
    g = GeoGrid(0, 0, 0.05, np.array([[1, 2], [3, 4]], dtype=np.float32))
    down = resample(g, 0.1)
    assert down.shape == (1, 1, 1)
    assert down.data[0, 0, 0] == 2.5 and down.mask[0, 0]


def test_downsample_ignores_invalid_and_masks_empty_blocks():
    data = np.array([[1, 2, 7, 7], [3, 100, 7, 7]], dtype=np.float32)
    mask = np.array([[1, 1, 0, 0], [1, 0, 0, 0]], dtype=bool)
    down = resample(GeoGrid(0, 0, 0.05, data, mask), 0.1)
    assert down.data[0, 0, 0] == pytest.approx(2.0)
    assert not down.mask[0, 1] and down.data[0, 1, 0] == 0


def test_all_invalid_block():
    g = GeoGrid(0, 0, 0.05, np.ones((2, 2)), np.zeros((2, 2), bool))
    down = resample(g, 0.1)
    assert not down.mask[0, 0] and down.data[0, 0, 0] == 0


def test_resample_rejects_non_integral_ratio():
    with pytest.raises(ResolutionRatioError):
        resample(_grid(4, 4), 0.075)


def test_resample_up_then_down_is_identity():
    g = _grid(6, 8, 2, res=0.1)
    assert resample(resample(g, 0.05), 0.1) == g


def test_space_to_depth_hand_enumeration():
    g = GeoGrid(0, 0, 0.05, np.arange(1, 17, dtype=np.float32).reshape(4, 4, 1))
    s = space_to_depth(g, 2)
    assert s.shape == (2, 2, 4)
    assert np.isclose(s.res, 0.1)
    np.testing.assert_array_equal(s.data[0, 0], [1, 2, 5, 6])
    np.testing.assert_array_equal(s.data[1, 1], [11, 12, 15, 16])
    back = depth_to_space(s, 2)
    np.testing.assert_array_equal(back.data[:, :, 0], np.arange(1, 17).reshape(4, 4))


def test_space_to_depth_multichannel_order():
    # block pixel outer, original channel inner
    data = np.stack([np.arange(4).reshape(2, 2), 10 + np.arange(4).reshape(2, 2)], axis=-1)
    s = space_to_depth(GeoGrid(0, 0, 1.0, data.astype(np.float32)), 2)
    np.testing.assert_array_equal(s.data[0, 0], [0, 10, 1, 11, 2, 12, 3, 13])


def test_space_to_depth_global_grid_shape():
    g = GeoGrid(90, -180, 0.05, np.zeros((3600, 7200, 1), dtype=np.float32))
    s = space_to_depth(g, 2)
    assert s.shape == (1800, 3600, 4)
    assert np.isclose(s.res, 0.1)


def test_block_one_identity():
    g = _grid(3, 5, 2)
    assert space_to_depth(g, 1) == g
    assert depth_to_space(g, 1) == g


def test_shape_errors():
    with pytest.raises(GridShapeError):
        space_to_depth(_grid(3, 4), 2)
    with pytest.raises(GridShapeError):
        depth_to_space(_grid(2, 2, 3), 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3),
       st.integers(0, 2**31 - 1))
def test_space_depth_roundtrip(hb, wb, c, block, seed):
    g = _grid(hb * block, wb * block, c, seed=seed)
    assert depth_to_space(space_to_depth(g, block), block) == g


def test_pad_longitude_global_width():
    g = GeoGrid(90, -180, 0.1, np.zeros((4, 3600, 1), dtype=np.float32))
    p = pad_longitude(g, 18)
    assert p.pad_lon_px == 180
    assert p.width == 3960


def test_pad_longitude_wraps():
    g = _grid(3, 10, 2, res=0.1)
    p = pad_longitude(g, 0.3)
    assert p.pad_lon_px == 3
    np.testing.assert_array_equal(p.data[:, 0], g.data[:, -3])
    np.testing.assert_array_equal(p.data[:, 2], g.data[:, -1])
    np.testing.assert_array_equal(p.data[:, -1], g.data[:, 2])
    # inner pixels untouched, bit-exact
    assert np.array_equal(p.data[:, 3:-3], g.data)
    # sums over padded columns match the wrapped source columns
    assert np.sort(p.data[:, :3].ravel()).astype(float).sum() == \
        np.sort(g.data[:, -3:].ravel()).astype(float).sum()
    assert np.sort(p.data[:, -3:].ravel()).astype(float).sum() == \
        np.sort(g.data[:, :3].ravel()).astype(float).sum()
    assert p.as_grid().lon0 == pytest.approx(g.lon0 - 0.3)


def test_pad_zero_identity():
    g = _grid(3, 10)
    p = pad_longitude(g, 0)
    assert p.pad_lon_px == 0 and np.array_equal(p.data, g.data)


def test_pad_rejects_fractional_pixels():
    with pytest.raises(ResolutionRatioError):
        pad_longitude(_grid(2, 10, res=0.1), 0.25)


def test_file_roundtrip(tmp_path):
    g = _grid(5, 7, 3)
    mask = np.random.default_rng(1).random((5, 7)) > 0.3
    g = g.with_data(g.data, mask)
    path = tmp_path / "g.grid"
    write_grid(path, g)
    assert read_grid(path) == g
    raw = path.read_bytes()
    header, _, rest = raw.partition(b"\n")
    assert len(rest) == 5 * 7 * 3 * 4 + 5  # 35 mask bits -> 5 bytes
    assert np.frombuffer(rest[:4], "<f4")[0] == g.data[0, 0, 0]
