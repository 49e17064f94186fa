import numpy as np
import pytest

from urbdiff import siamese as S
from urbdiff import tensor as T
from urbdiff.dataset import sample_patches
from urbdiff.errors import ConfigError, IncompatibleCheckpoint, ParseError, ShapeError, TruncatedFile
from urbdiff.raster import GeoTransform, Raster
from urbdiff.synthetic import change_task, identical_task


def small_net(seed=0, mode="absolute", bands=3, chans=(4, 8), patch=16):
    return S.Network.initialize(S.SiameseConfig(bands, list(chans), patch, mode), seed=seed)


def test_config_validation():
    with pytest.raises(ConfigError):
        S.SiameseConfig(13, [16, 32], 30)
    with pytest.raises(ConfigError):
        S.SiameseConfig(13, [32, 16], 32)
    with pytest.raises(ConfigError):
        S.SiameseConfig(13, [16], 32, "cosine")
    with pytest.raises(ConfigError):
        S.SiameseConfig(0, [16], 32)


def test_parameter_shapes():
    shapes = S.SiameseConfig(13, [16, 32, 64], 32).parameter_shapes()
    assert shapes["enc0.weight"] == (16, 13, 3, 3)
    assert shapes["enc2.weight"] == (64, 32, 3, 3)
    assert [shapes[f"dec{i}.weight"] for i in range(3)] == [(64, 32, 2, 2), (32, 16, 2, 2), (16, 16, 2, 2)]
    assert shapes["cls.weight"] == (2, 16)
    assert S.SiameseConfig(13, [16, 32], 32, "euclidean").parameter_shapes()["dec0.weight"] == (1, 16, 2, 2)


@pytest.mark.parametrize("mode", S.DIFF_MODES)
def test_output_shape_and_normalisation(mode, rng):
    net = S.Network.initialize(S.SiameseConfig(13, [16, 32], 32, mode), seed=1)
    a = rng.standard_normal((2, 13, 32, 32)).astype(np.float32)
    b = rng.standard_normal((2, 13, 32, 32)).astype(np.float32)
    logp = S.forward(net, a, b).data
    assert logp.shape == (2, 2, 32, 32)
    assert np.abs(np.exp(logp.astype(np.float64)).sum(axis=1) - 1).max() < 1e-6


@pytest.mark.parametrize("mode", S.DIFF_MODES)
def test_symmetry_is_bit_exact(mode, rng):
    net = small_net(seed=2, mode=mode)
    a = rng.standard_normal((3, 3, 16, 16)).astype(np.float32)
    b = rng.standard_normal((3, 3, 16, 16)).astype(np.float32)
    assert S.forward(net, a, b).data.tobytes() == S.forward(net, b, a).data.tobytes()


@pytest.mark.parametrize("mode", S.DIFF_MODES)
def test_identical_inputs_give_constant_output(mode, rng):
    net = small_net(seed=3, mode=mode)
    x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
    logp = S.forward(net, x, x).data
    assert np.all(logp == logp[:, :, :1, :1])
    y = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
    assert S.forward(net, y, y).data.tobytes() == logp.tobytes()


def test_encoder_weights_are_shared():
    net = small_net()
    assert len(net.encoder_parameters()) == 2 * net.config.depth
    names = list(net.params)
    assert not any(n.startswith("enc") and n.endswith("_b") for n in names)


def test_forward_shape_errors(rng):
    net = small_net()
    with pytest.raises(ShapeError):
        S.forward(net, np.zeros((1, 3, 16, 16)), np.zeros((1, 3, 16, 8)))
    with pytest.raises(ShapeError):
        S.forward(net, np.zeros((1, 4, 16, 16)), np.zeros((1, 4, 16, 16)))
    with pytest.raises(ShapeError):
        S.forward(net, np.zeros((1, 3, 10, 10)), np.zeros((1, 3, 10, 10)))


def test_end_to_end_gradient():
    net = S.Network.initialize(S.SiameseConfig(2, [4, 8], 8), seed=0)
    target = np.random.default_rng(9).integers(0, 2, (2, 8, 8))
    names = list(net.params)

    def op(a, b, *params):
        clone = S.Network(net.config, dict(zip(names, params)))
        return T.nll_weighted(S.forward(clone, a, b), target, (0.7, 1.6))

    shapes = [(2, 2, 8, 8)] * 2 + [p.shape for p in net.parameters()]
    assert T.finite_diff_check(op, shapes, seed=0) < 1e-3


def test_initialisation_is_seeded():
    a, b, c = small_net(seed=5), small_net(seed=5), small_net(seed=6)
    for n in a.params:
        assert a.params[n].data.tobytes() == b.params[n].data.tobytes()
    assert any(a.params[n].data.tobytes() != c.params[n].data.tobytes() for n in a.params)


# --------------------------------------------------------------------------
# training


def test_identical_pairs_learn_no_change():
    patches = sample_patches(identical_task(2, 32, 3, seed=0), None, 16, 32, seed=0)
    net = small_net(seed=0)
    res = S.train(net, patches, epochs=10, batch=8, lr=0.05, class_weights=(1.0, 1.0), seed=0)
    assert res.trace[-1].loss < 0.05


def test_training_improves_and_reports_trace():
    regs = change_task(4, 48, 3, seed=1)
    patches = sample_patches(regs, "train", 16, 64, 0.5, seed=0)
    net = small_net(seed=0)
    seen = []
    res = S.train(net, patches, epochs=4, batch=16, lr=0.05, seed=0, on_epoch=seen.append)
    assert [s.epoch for s in res.trace] == [1, 2, 3, 4]
    assert seen == res.trace
    assert res.trace[-1].loss < res.trace[0].loss
    loss, acc = S.evaluate(net, patches)
    assert 0 < acc <= 1 and np.isfinite(loss)


def test_training_is_deterministic(tmp_path):
    regs = change_task(2, 32, 3, seed=2)
    patches = sample_patches(regs, "train", 16, 24, 0.5, seed=0)
    blobs = []
    for i in range(2):
        net = small_net(seed=4)
        S.train(net, patches, epochs=2, batch=8, lr=0.05, seed=11, augment=True,
                checkpoint=tmp_path / f"m{i}.scdc")
        blobs.append((tmp_path / f"m{i}.scdc").read_bytes())
    assert blobs[0] == blobs[1]


def test_training_rejects_empty():
    with pytest.raises(ValueError):
        S.train(small_net(), [], epochs=1)


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    net = small_net(seed=7, mode="euclidean")
    back = S.checkpoint_roundtrip(net, tmp_path / "m.scdc")
    a = rng.standard_normal((1, 3, 16, 16)).astype(np.float32)
    b = rng.standard_normal((1, 3, 16, 16)).astype(np.float32)
    assert S.forward(net, a, b).data.tobytes() == S.forward(back, a, b).data.tobytes()
    inferred = S.load_checkpoint(tmp_path / "m.scdc")
    assert inferred.config.encoder_channels == [4, 8]
    assert inferred.config.diff_mode == "euclidean"


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "m.scdc"
    S.save_checkpoint(small_net(), path)
    blob = path.read_bytes()
    for cut in (2, 10, len(blob) // 2, len(blob) - 1):
        (tmp_path / "t.scdc").write_bytes(blob[:cut])
        with pytest.raises(ParseError):
            S.load_checkpoint(tmp_path / "t.scdc")
    assert issubclass(TruncatedFile, ParseError)


def test_bad_magic_checkpoint(tmp_path):
    path = tmp_path / "m.scdc"
    S.save_checkpoint(small_net(), path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ParseError):
        S.load_checkpoint(path)


def test_incompatible_checkpoint(tmp_path):
    path = tmp_path / "m.scdc"
    S.save_checkpoint(S.Network.initialize(S.SiameseConfig(13, [16, 32], 32)), path)
    with pytest.raises(IncompatibleCheckpoint):
        S.load_checkpoint(path, S.SiameseConfig(13, [16, 32, 64], 32))
    S.load_checkpoint(path, S.SiameseConfig(13, [16, 32], 64))


# --------------------------------------------------------------------------
# scene inference


def test_predict_scene_identical_is_uniform(rng):
    net = small_net(seed=1)
    img = Raster(rng.standard_normal((3, 40, 56)).astype(np.float32), GeoTransform(), ("a", "b", "c"))
    cm = S.predict_scene(net, img, img)
    assert cm.labels.shape == (40, 56)
    assert np.unique(cm.labels).size == 1
    assert np.ptp(cm.probabilities) < 1e-6


def test_predict_scene_threads_agree(rng):
    net = small_net(seed=1)
    a = Raster(rng.standard_normal((3, 33, 47)).astype(np.float32))
    b = Raster(rng.standard_normal((3, 33, 47)).astype(np.float32))
    one = S.predict_scene(net, a, b, threads=1)
    two = S.predict_scene(net, a, b, threads=2)
    assert one.probabilities.tobytes() == two.probabilities.tobytes()
    assert set(np.unique(one.labels)) <= {0, 1}
    assert np.all((one.probabilities > 0.5) == (one.labels == 1))
    lab, prob = one.to_rasters(GeoTransform())
    assert lab.band_ids == ("change",) and prob.samples.shape == (1, 33, 47)


def test_predict_scene_band_mismatch(rng):
    net = small_net()
    a = Raster(np.zeros((2, 16, 16), np.float32))
    with pytest.raises(ShapeError):
        S.predict_scene(net, a, a)
