import numpy as np

from urbdiff import plots
from urbdiff.coreg import FlowField
from urbdiff.metrics import Confusion
from urbdiff.siamese import EpochStats

PNG = b"\x89PNG\r\n\x1a\n"


def is_png(path):
    return path.exists() and path.read_bytes()[:8] == PNG


def test_figures_are_written(tmp_path, rng):
    labels = (rng.uniform(size=(20, 30)) > 0.8).astype(np.uint8)
    paths = [
        plots.change_map_figure(labels, rng.uniform(size=(20, 30)), tmp_path / "a" / "change.png"),
        plots.change_map_figure(labels, None, tmp_path / "change1.png"),
        plots.training_curves([EpochStats(i, 1 / i, 0.5 + i / 10) for i in range(1, 5)],
                              tmp_path / "train.png"),
        plots.confusion_figure(Confusion(5, 2, 1, 9), tmp_path / "conf.png"),
        plots.segment_figure(rng.uniform(size=(4, 20, 30)), np.arange(600).reshape(20, 30) // 75,
                             tmp_path / "seg.png"),
        plots.segment_figure(rng.uniform(size=(1, 20, 30)), np.zeros((20, 30), int), tmp_path / "seg1.png"),
        plots.landcover_figure(labels, tmp_path / "lc.png"),
        plots.flow_figure(FlowField(np.ones((40, 40), np.float32), np.zeros((40, 40), np.float32)),
                          tmp_path / "flow.png"),
    ]
    assert all(is_png(p) for p in paths)
