import numpy as np
import pytest

from urbdiff.dataset import OSCD_BANDS
from urbdiff.raster import GeoTransform, write_tiff_band
from urbdiff.synthetic import change_task

FIXTURES = __import__("pathlib").Path(__file__).parent / "fixtures"


def make_oscd_tree(root, size=64, seed=0, cities=(("alpha", "train"), ("beta", "train"), ("gamma", "test"))):
    """Small OSCD-style tree: 13 float32 TIFF bands per date, {1,2} change masks."""
    regions = change_task(n_regions=len(cities), size=size, bands=13, seed=seed)
    geo = GeoTransform(500000.0, 1500000.0, 10.0, -10.0)
    for (city, _), reg in zip(cities, regions):
        for sub, img in (("imgs_1_rect", reg.a), ("imgs_2_rect", reg.b)):
            d = root / "images" / city / sub
            d.mkdir(parents=True)
            for band, data in zip(OSCD_BANDS, img):
                write_tiff_band(d / f"{band}.tif", data.astype(np.float32), geo)
        cm = root / "labels" / city / "cm"
        cm.mkdir(parents=True)
        write_tiff_band(cm / f"{city}-cm.tif", (reg.label + 1).astype(np.uint8), geo)
    for split in ("train", "test"):
        names = [c for c, s in cities if s == split]
        (root / "images" / f"{split}.txt").write_text(",".join(names))
    return regions


@pytest.fixture(scope="session")
def oscd_tree(tmp_path_factory):
    root = tmp_path_factory.mktemp("oscd")
    regions = make_oscd_tree(root)
    return root, regions


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
