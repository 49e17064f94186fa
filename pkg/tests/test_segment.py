import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urbdiff import segment as G
from urbdiff.errors import ConfigError, ShapeError
from urbdiff.raster import GeoTransform, Raster


def same_partition(a, b):
    """True when the two label maps are equal up to renaming."""
    pairs = set(zip(a.ravel().tolist(), b.ravel().tolist()))
    return len(pairs) == len(np.unique(a)) == len(np.unique(b))


def voronoi_grid(h, w, n):
    """Nearest-centre map for an n x n grid of cell centres."""
    cy = (np.arange(n) + 0.5) * h / n - 0.5
    cx = (np.arange(n) + 0.5) * w / n - 0.5
    yy, xx = np.mgrid[0:h, 0:w]
    ry = np.abs(yy[..., None] - cy).argmin(axis=-1)
    rx = np.abs(xx[..., None] - cx).argmin(axis=-1)
    return ry * n + rx


def test_config_validation():
    for kwargs in ({"n_segments": 0}, {"compactness": 0}, {"max_iters": 0}):
        with pytest.raises(ConfigError):
            G.SlicConfig(**kwargs)


@pytest.mark.parametrize("k", [4, 9, 16])
def test_uniform_image_recovers_grid(k):
    r = Raster(np.full((2, 100, 100), 3.0, np.float32))
    s = G.slic(r, G.SlicConfig(n_segments=k))
    assert s.count == k
    assert same_partition(s.labels, voronoi_grid(100, 100, int(np.sqrt(k))))


def test_one_segment_per_pixel():
    r = Raster(np.random.default_rng(0).standard_normal((1, 5, 6)).astype(np.float32))
    s = G.slic(r, G.SlicConfig(n_segments=30))
    assert sorted(s.labels.ravel().tolist()) == list(range(30))


def test_too_many_segments():
    r = Raster(np.zeros((1, 4, 4), np.float32))
    with pytest.raises(ConfigError):
        G.slic(r, G.SlicConfig(n_segments=17))


def test_two_tone_boundary():
    img = np.zeros((1, 10, 20), np.float32)
    img[:, :, 8:] = 1.0
    s = G.slic(Raster(img), G.SlicConfig(n_segments=2, compactness=0.01))
    assert s.count == 2
    assert np.all(s.labels[:, :8] == s.labels[0, 0])
    assert np.all(s.labels[:, 8:] == s.labels[0, -1])
    assert s.labels[0, 0] != s.labels[0, -1]


@pytest.mark.parametrize("seed", range(10))
def test_energy_is_monotone(seed):
    rng = np.random.default_rng(seed)
    r = Raster(rng.standard_normal((3, 40, 50)).astype(np.float32))
    s = G.slic(r, G.SlicConfig(n_segments=int(rng.integers(5, 60)), compactness=float(rng.uniform(0.05, 2))))
    e = np.array(s.energy)
    assert len(e) == 10
    assert np.all(np.diff(e) <= 1e-9 * np.abs(e[:-1]))


@pytest.mark.parametrize("seed", range(5))
def test_segments_are_connected_and_dense(seed):
    rng = np.random.default_rng(seed)
    r = Raster(rng.standard_normal((2, 48, 48)).astype(np.float32))
    s = G.slic(r, G.SlicConfig(n_segments=36, compactness=0.1))
    comp = G.connected_components(s.labels)
    assert comp.max() + 1 == s.count
    assert set(np.unique(s.labels)) == set(range(s.count))
    assert s.labels.dtype == np.int32
    assert s.sizes().sum() == 48 * 48


def test_slic_is_deterministic(rng):
    r = Raster(rng.standard_normal((3, 30, 30)).astype(np.float32))
    a = G.slic(r, G.SlicConfig(n_segments=20))
    b = G.slic(r, G.SlicConfig(n_segments=20))
    assert a.labels.tobytes() == b.labels.tobytes() and a.energy == b.energy


def test_relabel_dense_first_appearance():
    lab = np.array([[7, 7, 3], [9, 3, 3]])
    np.testing.assert_array_equal(G.relabel_dense(lab), [[0, 0, 1], [2, 1, 1]])


def test_connected_components_splits_by_label_and_adjacency():
    lab = np.array([[1, 0, 1], [1, 0, 0], [0, 0, 1]])
    comp = G.connected_components(lab)
    # the zeros form one region; the ones fall into three
    assert comp.max() + 1 == 4
    assert comp[0, 0] == comp[1, 0] and comp[0, 2] != comp[0, 0] and comp[2, 2] != comp[0, 2]
    assert len({comp[0, 1], comp[1, 2], comp[2, 0]}) == 1


def test_enforce_connectivity_merges_small_fragments():
    lab = np.zeros((6, 6), int)
    lab[:, 3:] = 1
    lab[0, 0] = 1  # a stray one-pixel fragment of segment 1
    out = G.enforce_connectivity(lab, min_size=4)
    assert out[0, 0] == out[1, 1]
    assert len(np.unique(out)) == 2
    assert G.connected_components(out).max() + 1 == 2


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 5))
def test_enforce_connectivity_property(seed, n):
    lab = np.random.default_rng(seed).integers(0, n, (12, 12))
    out = G.enforce_connectivity(lab, 3)
    comp = G.connected_components(out)
    # every output label is one 4-connected region of at least the minimum size
    assert comp.max() + 1 == len(np.unique(out))
    assert np.bincount(G.relabel_dense(out).ravel()).min() >= 3 or len(np.unique(out)) == 1


def test_features_by_hand():
    bands = np.zeros((2, 2, 4), np.float32)
    bands[0] = [[1, 1, 2, 2], [1, 1, 2, 4]]  # red
    bands[1] = [[3, 3, 2, 2], [3, 3, 2, 2]]  # nir
    r = Raster(bands, GeoTransform(), ("B04", "B08"))
    s = G.SegmentMap(np.array([[0, 0, 1, 1], [0, 0, 1, 1]], np.int32))
    f = G.superpixel_features(r, s)
    assert f.shape == (2, 5)
    np.testing.assert_allclose(f[:, 0], [1.0, 2.5])
    np.testing.assert_allclose(f[:, 1], [3.0, 2.0])
    np.testing.assert_allclose(f[:, 2], [0.0, np.sqrt(0.75)])
    np.testing.assert_allclose(f[:, 3], [0.0, 0.0])
    ndvi1 = np.mean([0, 0, 0, (2 - 4) / (6 + 1e-6)])
    np.testing.assert_allclose(f[:, 4], [2 / (4 + 1e-6), ndvi1])
    assert G.feature_names(r) == ["mean_B04", "mean_B08", "std_B04", "std_B08", "ndvi_mean"]


def test_band_roles():
    r = Raster(np.ones((3, 2, 2), np.float32), GeoTransform(), ("B2", "B4", "B8"))
    s = G.SegmentMap(np.zeros((2, 2), np.int32))
    assert G.superpixel_features(r, s, red=1, nir=2).shape == (1, 7)
    assert G.superpixel_features(r, s, red="B04", nir="b08").shape == (1, 7)
    with pytest.raises(ConfigError):
        G.superpixel_features(r, s, red="B5")
    with pytest.raises(ConfigError):
        G.superpixel_features(r, s, red=5, nir=2)
    with pytest.raises(ShapeError):
        G.superpixel_features(r, G.SegmentMap(np.zeros((3, 2), np.int32)), red=1, nir=2)


def test_segment_raster():
    s = G.SegmentMap(np.array([[0, 1], [1, 2]], np.int32))
    out = s.to_raster()
    assert out.samples.dtype == np.int32 and out.band_ids == ("segment",)
