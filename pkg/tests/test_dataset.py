import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urbdiff import dataset as D
from urbdiff.errors import BalanceError, DegenerateSplit, ManifestError
from urbdiff.synthetic import change_task


def write_manifest(root, doc):
    path = root / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


def test_scan_and_load_oscd_tree(oscd_tree):
    root, regions = oscd_tree
    doc = D.scan_oscd_tree(root)
    assert [e["region"] for e in doc["entries"]] == ["alpha", "beta", "gamma"]
    assert [e["split"] for e in doc["entries"]] == ["train", "train", "test"]
    assert all(e["label_change_value"] == 2 for e in doc["entries"])
    m = D.load_manifest(write_manifest(root, doc))
    assert len(m) == 3 and m.splits() == {"train", "test"}
    reg = m.regions("test")[0]
    assert reg.a.shape == (13, 64, 64) and reg.a.dtype == np.float32
    np.testing.assert_array_equal(reg.label, regions[2].label)
    # z-score normalisation per band
    np.testing.assert_allclose(reg.a.mean(axis=(1, 2)), 0, atol=1e-5)
    assert reg.geo.origin_x == 500000.0
    assert m.region(m.entries[2]) is reg


def test_manifest_round_trip(oscd_tree, tmp_path):
    root, _ = oscd_tree
    m = D.load_manifest(write_manifest(root, D.scan_oscd_tree(root)))
    doc = D.manifest_to_dict(m, root)
    again = D.load_manifest(write_manifest(root, doc))
    assert [e.t1 for e in again.entries] == [e.t1 for e in m.entries]


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d["entries"][0]["t1"].pop(), "band paths"),
    (lambda d: d["entries"][0].update(split="val"), "unknown split"),
    (lambda d: d["entries"][0].pop("label"), "malformed"),
    (lambda d: d["entries"][0].update(label="labels/nowhere.tif"), "missing file"),
    (lambda d: d.update(entries=[]), "no entries"),
])
def test_manifest_errors(oscd_tree, tmp_path, mutate, message):
    root, _ = oscd_tree
    doc = D.scan_oscd_tree(root)
    mutate(doc)
    path = tmp_path / "m.json"
    # keep paths resolvable from the temporary manifest
    for e in doc["entries"]:
        for key in ("t1", "t2"):
            e[key] = [str(root / p) for p in e[key]]
        if "label" in e:
            e["label"] = str(root / e["label"])
    path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match=message):
        D.load_manifest(path)


def test_manifest_rejects_bad_json(tmp_path):
    (tmp_path / "m.json").write_text("{")
    with pytest.raises(ManifestError):
        D.load_manifest(tmp_path / "m.json")
    (tmp_path / "m.json").write_text("[]")
    with pytest.raises(ManifestError):
        D.load_manifest(tmp_path / "m.json")


def test_manifest_size_mismatch(oscd_tree, tmp_path):
    from urbdiff.raster import write_tiff_band

    root, _ = oscd_tree
    doc = D.scan_oscd_tree(root)
    odd = tmp_path / "odd.tif"
    write_tiff_band(odd, np.zeros((32, 32), np.float32))
    e = doc["entries"][0]
    e["t1"] = [str(root / p) for p in e["t1"]]
    e["t2"] = [str(root / p) for p in e["t2"]]
    e["label"] = str(odd)
    doc["entries"] = [e]
    with pytest.raises(ManifestError, match="expected 64x64"):
        D.load_manifest(write_manifest(tmp_path, doc))


def test_label_binarisation():
    raw = np.array([[1, 2], [2, 1]])
    assert D.detect_change_value(raw) == 2
    np.testing.assert_array_equal(D.binarize_label(raw, 2), [[0, 1], [1, 0]])
    assert D.detect_change_value(np.array([0, 1])) is None
    np.testing.assert_array_equal(D.binarize_label(np.array([0, 255, 3])), [0, 1, 1])


def test_class_weights_example():
    reg = D.Region("r", np.zeros((1, 1, 10)), np.zeros((1, 1, 10)),
                   np.array([[1, 0, 0, 0, 0, 0, 0, 0, 0, 0]], np.uint8))
    w0, w1 = D.class_weights([reg])
    assert w0 == pytest.approx(10 / 18) and w1 == pytest.approx(5.0)
    with pytest.raises(DegenerateSplit):
        D.class_weights([D.Region("z", reg.a, reg.b, np.zeros((1, 10), np.uint8))])
    with pytest.raises(DegenerateSplit):
        D.class_weights([reg], "test")


def test_sample_patches_shapes_bounds_and_determinism():
    regs = change_task(3, 40, 3, seed=0)
    a = D.sample_patches(regs, "train", 16, 50, seed=4)
    b = D.sample_patches(regs, "train", 16, 50, seed=4)
    assert len(a) == 50
    for p, q in zip(a, b):
        assert p.offset == q.offset and p.region == q.region
        r0, c0 = p.offset
        assert 0 <= r0 <= 40 - 16 and 0 <= c0 <= 40 - 16
        assert p.a.shape == (3, 16, 16) and p.label.shape == (16, 16)
        reg = next(r for r in regs if r.name == p.region)
        np.testing.assert_array_equal(p.b, reg.b[:, r0 : r0 + 16, c0 : c0 + 16])


def test_balanced_sampling():
    regs = change_task(2, 64, 3, seed=0, rects=1, rect_size=(3, 3))
    patches = D.sample_patches(regs, "train", 8, 40, balance_fraction=1.0, seed=2)
    assert all(p.label.any() for p in patches)
    none = [D.Region("n", regs[0].a, regs[0].b, np.zeros((64, 64), np.uint8))]
    with pytest.raises(BalanceError):
        D.sample_patches(none, None, 8, 4, balance_fraction=0.5)


def test_sampling_argument_checks():
    regs = change_task(1, 16, 3)
    for kwargs in ({"patch": 7}, {"patch": 32}, {"count": 0}, {"balance_fraction": 1.5}):
        args = {"patch": 8, "count": 4, **kwargs}
        with pytest.raises(ValueError):
            D.sample_patches(regs, "train", **args)


def make_patch(rng, n=6):
    return D.PatchPair(rng.standard_normal((2, n, n)), rng.standard_normal((2, n, n)),
                       rng.integers(0, 2, (n, n)).astype(np.uint8))


def same(p, q):
    return all(np.array_equal(getattr(p, k), getattr(q, k)) for k in ("a", "b", "label"))


def test_augment_identity_and_order(rng):
    p = make_patch(rng)
    assert same(D.augment(p, 0), p)
    for k in range(8):
        x = p
        for _ in range(4 if k < 4 else 2):
            x = D.augment(x, k)
        assert same(x, p), k
    outs = [D.augment(p, k).label.tobytes() for k in range(8)]
    assert len(set(outs)) == 8


@settings(max_examples=64, deadline=None)
@given(f=st.integers(0, 7), g=st.integers(0, 7))
def test_augment_group_laws(f, g):
    p = make_patch(np.random.default_rng(f * 8 + g))
    assert same(D.augment(D.augment(p, f), g), D.augment(p, D.dihedral_compose(f, g)))
    assert same(D.augment(D.augment(p, f), D.dihedral_inverse(f)), p)


def test_augment_keeps_pixel_correspondence(rng):
    p = make_patch(rng)
    for k in range(8):
        q = D.augment(p, k)
        # each output pixel keeps its label/feature pairing
        pairs = {(float(q.a[0][i]), int(q.label[i])) for i in np.ndindex(q.label.shape)}
        assert pairs == {(float(p.a[0][i]), int(p.label[i])) for i in np.ndindex(p.label.shape)}
    with pytest.raises(ValueError):
        D.augment(p, 8)
