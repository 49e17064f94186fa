"""Labeled scene pairs: manifests, patch sampling, augmentation, class weights."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from urbdiff.errors import BalanceError, DegenerateSplit, ManifestError
from urbdiff.raster import GeoTransform, Raster, merge_bands, normalize, raster_exists, read_raster

log = logging.getLogger(__name__)

OSCD_BANDS = ("B01", "B02", "B03", "B04", "B05", "B06", "B07", "B08", "B8A", "B09", "B10", "B11", "B12")
BANDS_PER_DATE = len(OSCD_BANDS)
SPLITS = ("train", "test")
BALANCE_ATTEMPTS = 64


@dataclass
class ManifestEntry:
    region: str
    t1: list[Path]
    t2: list[Path]
    label: Path
    split: str
    label_change_value: int | None = None


@dataclass
class Region:
    """One scene pair held in memory: (bands, H, W) arrays and a {0,1} mask."""

    name: str
    a: np.ndarray
    b: np.ndarray
    label: np.ndarray
    split: str = "train"
    geo: GeoTransform = field(default_factory=GeoTransform)


@dataclass
class PatchPair:
    a: np.ndarray
    b: np.ndarray
    label: np.ndarray
    region: str = ""
    offset: tuple[int, int] = (0, 0)


class Manifest:
    def __init__(self, entries: Sequence[ManifestEntry], normalization: str | None = "zscore"):
        self.entries = list(entries)
        self.normalization = normalization
        self._cache: dict[str, Region] = {}

    def __len__(self):
        return len(self.entries)

    def splits(self) -> set[str]:
        return {e.split for e in self.entries}

    def region(self, entry: ManifestEntry) -> Region:
        if entry.region not in self._cache:
            self._cache[entry.region] = _load_region(entry, self.normalization)
        return self._cache[entry.region]

    def regions(self, split: str | None = None) -> list[Region]:
        return [self.region(e) for e in self.entries if split is None or e.split == split]


def _stack_date(paths: Sequence[Path], normalization) -> tuple[np.ndarray, GeoTransform]:
    r = merge_bands([read_raster(p, band_id=Path(p).stem) for p in paths])
    if normalization:
        r = normalize(r, normalization)
    return np.asarray(r.samples, dtype=np.float32), r.geo


def detect_change_value(raw: np.ndarray) -> int | None:
    """2 for OSCD-style masks (1 = no change, 2 = change), else None (nonzero = change)."""
    values = set(np.unique(raw).tolist())
    return 2 if values == {1, 2} else None


def binarize_label(raw: np.ndarray, change_value: int | None = None) -> np.ndarray:
    if change_value is None:
        return (raw != 0).astype(np.uint8)
    return (raw == change_value).astype(np.uint8)


def _load_region(entry: ManifestEntry, normalization) -> Region:
    a, geo = _stack_date(entry.t1, normalization)
    b, _ = _stack_date(entry.t2, normalization)
    label = binarize_label(read_raster(entry.label).samples[0], entry.label_change_value)
    return Region(entry.region, a, b, label, entry.split, geo)


def load_manifest(path, check_files: bool = True) -> Manifest:
    """Parse and validate a dataset manifest.

    Paths inside the manifest are resolved relative to the manifest's directory.
    Every referenced raster is opened to check per-region dimensions.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("entries"), list):
        raise ManifestError(f"{path}: expected an object with an 'entries' list")
    if not doc["entries"]:
        raise ManifestError(f"{path}: manifest has no entries")
    base = path.parent
    entries = []
    for raw in doc["entries"]:
        try:
            name = str(raw["region"])
            t1 = [base / p for p in raw["t1"]]
            t2 = [base / p for p in raw["t2"]]
            label = base / raw["label"]
            split = raw.get("split", "train")
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: malformed entry {raw!r} ({exc})") from exc
        for key, paths in (("t1", t1), ("t2", t2)):
            if len(paths) != BANDS_PER_DATE:
                raise ManifestError(
                    f"region {name}: {key} lists {len(paths)} band paths, expected {BANDS_PER_DATE}"
                )
        if split not in SPLITS:
            raise ManifestError(f"region {name}: unknown split {split!r}")
        entries.append(ManifestEntry(name, t1, t2, label, split, raw.get("label_change_value")))
    if check_files:
        for e in entries:
            _check_entry(e)
    return Manifest(entries, doc.get("normalization", "zscore"))


def _check_entry(e: ManifestEntry) -> None:
    dims = None
    for p in [*e.t1, *e.t2, e.label]:
        if not raster_exists(p):
            raise ManifestError(f"region {e.region}: missing file {p}")
        try:
            r = read_raster(p)
        except Exception as exc:  # any parse failure is a manifest problem here
            raise ManifestError(f"region {e.region}: cannot read {p} ({exc})") from exc
        if dims is None:
            dims = (r.height, r.width)
        elif (r.height, r.width) != dims:
            raise ManifestError(
                f"region {e.region}: {p} is {r.height}x{r.width}, expected {dims[0]}x{dims[1]}"
            )


def manifest_to_dict(m: Manifest, base: Path | None = None) -> dict:
    def rel(p):
        return str(Path(p).relative_to(base)) if base else str(p)

    return {
        "normalization": m.normalization,
        "entries": [
            {
                "region": e.region,
                "split": e.split,
                "t1": [rel(p) for p in e.t1],
                "t2": [rel(p) for p in e.t2],
                "label": rel(e.label),
                **({"label_change_value": e.label_change_value} if e.label_change_value is not None else {}),
            }
            for e in m.entries
        ],
    }


def scan_oscd_tree(root) -> dict:
    """Build a manifest document from an OSCD-style directory tree.

    Expected layout: ``<city>/imgs_1_rect/B01.tif ... B12.tif`` and
    ``imgs_2_rect`` for the second date, labels at ``<city>/cm/*.tif`` under
    any labels directory, and ``train.txt`` / ``test.txt`` listing
    comma-separated city names. Paths are written relative to ``root``.
    """
    root = Path(root)
    split_of = {}
    for split in SPLITS:
        for listing in sorted(root.rglob(f"{split}.txt")):
            for city in listing.read_text().replace("\n", ",").split(","):
                if city.strip():
                    split_of[city.strip()] = split
    entries = []
    for t1_dir in sorted(root.rglob("imgs_1_rect")):
        city_dir = t1_dir.parent
        city = city_dir.name
        t2_dir = city_dir / "imgs_2_rect"
        t1 = [t1_dir / f"{b}.tif" for b in OSCD_BANDS]
        t2 = [t2_dir / f"{b}.tif" for b in OSCD_BANDS]
        labels = sorted(p for p in root.rglob("*.tif") if p.parent.name == "cm" and p.parent.parent.name == city)
        if not labels:
            log.warning("no change mask for %s; skipped", city)
            continue
        entry = {
            "region": city,
            "split": split_of.get(city, "train"),
            "t1": [str(p.relative_to(root)) for p in t1],
            "t2": [str(p.relative_to(root)) for p in t2],
            "label": str(labels[0].relative_to(root)),
        }
        try:
            change_value = detect_change_value(read_raster(labels[0]).samples)
        except Exception:
            change_value = None
        if change_value is not None:
            # OSCD masks encode no-change as 1 and change as 2
            entry["label_change_value"] = change_value
        entries.append(entry)
    return {"normalization": "zscore", "entries": entries}


# --------------------------------------------------------------------------
# sampling


def _regions_of(source, split) -> list[Region]:
    if isinstance(source, Manifest):
        return source.regions(split)
    return [r for r in source if split is None or r.split == split]


def sample_patches(source, split: str | None, patch: int, count: int,
                   balance_fraction: float = 0.0, seed: int = 0) -> list[PatchPair]:
    """Draw ``count`` random patch pairs from the regions of ``split``.

    A ``balance_fraction`` share of the draws is forced to contain at least one
    change pixel. The result is fully determined by ``seed``.
    """
    if patch % 2 or patch <= 0:
        raise ValueError("patch size must be positive and even")
    if count < 1:
        raise ValueError("count must be at least 1")
    if not 0 <= balance_fraction <= 1:
        raise ValueError("balance_fraction must lie in [0, 1]")
    regions = [r for r in _regions_of(source, split) if min(r.label.shape) >= patch]
    if not regions:
        raise ValueError(f"no region of split {split!r} is at least {patch}x{patch}")
    rng = np.random.default_rng(seed)
    n_bal = int(round(count * balance_fraction))
    flags = np.zeros(count, bool)
    flags[:n_bal] = True
    flags = rng.permutation(flags)
    changed = [r for r in regions if r.label.any()]
    if n_bal and not changed:
        raise BalanceError("balanced sampling requested but no region has change pixels")

    out = []
    for want_change in flags:
        pool = changed if want_change else regions
        reg = pool[int(rng.integers(len(pool)))]
        h, w = reg.label.shape
        r0, c0 = int(rng.integers(h - patch + 1)), int(rng.integers(w - patch + 1))
        if want_change:
            for _ in range(BALANCE_ATTEMPTS):
                if reg.label[r0 : r0 + patch, c0 : c0 + patch].any():
                    break
                r0, c0 = int(rng.integers(h - patch + 1)), int(rng.integers(w - patch + 1))
            else:
                # anchor the window on a random change pixel
                ys, xs = np.nonzero(reg.label)
                k = int(rng.integers(len(ys)))
                r0 = int(rng.integers(max(0, ys[k] - patch + 1), min(ys[k], h - patch) + 1))
                c0 = int(rng.integers(max(0, xs[k] - patch + 1), min(xs[k], w - patch) + 1))
        out.append(PatchPair(
            reg.a[:, r0 : r0 + patch, c0 : c0 + patch].copy(),
            reg.b[:, r0 : r0 + patch, c0 : c0 + patch].copy(),
            reg.label[r0 : r0 + patch, c0 : c0 + patch].copy(),
            reg.name,
            (r0, c0),
        ))
    return out


# --------------------------------------------------------------------------
# dihedral augmentation
#
# Element k in 0..7 means: rotate by (k % 4) quarter turns, then flip
# left-right if k >= 4.


def _apply(arr: np.ndarray, k: int) -> np.ndarray:
    out = np.rot90(arr, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment(p: PatchPair, transform: int) -> PatchPair:
    if not 0 <= transform < 8:
        raise ValueError("transform must be a dihedral element index 0..7")
    if p.label.shape[0] != p.label.shape[1]:
        raise ValueError("augmentation needs square patches")
    return PatchPair(_apply(p.a, transform), _apply(p.b, transform), _apply(p.label, transform),
                     p.region, p.offset)


def dihedral_compose(first: int, second: int) -> int:
    """Element equal to applying ``first`` and then ``second``."""
    f1, r1 = first >= 4, first % 4
    f2, r2 = second >= 4, second % 4
    rot = (r1 - r2 if f1 else r1 + r2) % 4
    return rot + 4 * (f1 ^ f2)


def dihedral_inverse(k: int) -> int:
    return k if k >= 4 else (4 - k) % 4


# --------------------------------------------------------------------------
# class weights


def weights_from_counts(n0: int, n1: int) -> tuple[float, float]:
    if n0 == 0 or n1 == 0:
        raise DegenerateSplit(f"a class is absent (no-change={n0}, change={n1})")
    total = n0 + n1
    return total / (2 * n0), total / (2 * n1)


def class_weights(source, split: str | None = "train") -> tuple[float, float]:
    """Inverse-frequency weights w_c = N / (2 N_c) over the split's label pixels."""
    regions = _regions_of(source, split)
    if not regions:
        raise DegenerateSplit(f"split {split!r} is empty")
    n1 = sum(int(np.count_nonzero(r.label)) for r in regions)
    total = sum(r.label.size for r in regions)
    return weights_from_counts(total - n1, n1)


def region_from_rasters(name: str, a: Raster, b: Raster, label: np.ndarray, split="train") -> Region:
    return Region(name, np.asarray(a.samples, np.float32), np.asarray(b.samples, np.float32),
                  binarize_label(np.asarray(label)), split, a.geo)
