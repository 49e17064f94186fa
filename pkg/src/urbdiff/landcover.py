"""Urban / non-urban land cover: sample ingestion and a from-scratch random forest."""

from __future__ import annotations

import csv
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from urbdiff.errors import (
    ConfigError, DegenerateSplit, IncompatibleCheckpoint, ParseError, SampleError, ShapeError,
    TruncatedFile,
)
from urbdiff.metrics import Confusion, confusion
from urbdiff.raster import GeoTransform, Raster
from urbdiff.segment import SegmentMap

URBAN, NONURBAN = 0, 1
LABEL_NAMES = {"urban": URBAN, "nonurban": NONURBAN, "non-urban": NONURBAN}

FOREST_MAGIC = b"RFOR"
FOREST_VERSION = 1


@dataclass(frozen=True)
class SamplePoint:
    x: float
    y: float
    label: int  # URBAN or NONURBAN


def _parse_label(value) -> int:
    if isinstance(value, str):
        key = value.strip().lower()
        if key in LABEL_NAMES:
            return LABEL_NAMES[key]
        try:
            value = int(key)
        except ValueError:
            raise ParseError(f"unknown sample label {value!r}") from None
    if value not in (URBAN, NONURBAN):
        raise ParseError(f"sample label must be 0 (urban) or 1 (nonurban), got {value!r}")
    return int(value)


def read_points(path) -> list[SamplePoint]:
    """Read sample points from CSV (columns x, y, label) or geoJSON points
    (``label`` property)."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() in (".json", ".geojson"):
        return parse_geojson_points(text)
    rows = list(csv.DictReader(text.splitlines()))
    if rows and not {"x", "y", "label"} <= set(rows[0]):
        raise ParseError(f"{path}: CSV needs columns x, y, label")
    try:
        return [SamplePoint(float(r["x"]), float(r["y"]), _parse_label(r["label"])) for r in rows]
    except (TypeError, ValueError) as e:
        raise ParseError(f"{path}: bad sample row: {e}") from None


def parse_geojson_points(doc) -> list[SamplePoint]:
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e}") from None
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise ParseError("sample points must be a geoJSON FeatureCollection")
    out = []
    for i, feat in enumerate(doc.get("features") or []):
        geom = (feat or {}).get("geometry") or {}
        coords = geom.get("coordinates")
        if geom.get("type") != "Point" or not isinstance(coords, list) or len(coords) < 2:
            raise ParseError(f"feature {i} is not a Point")
        props = feat.get("properties") or {}
        if "label" not in props:
            raise ParseError(f"feature {i} has no label property")
        out.append(SamplePoint(float(coords[0]), float(coords[1]), _parse_label(props["label"])))
    return out


@dataclass
class SampleRows:
    features: np.ndarray  # (n, F)
    labels: np.ndarray  # (n,) int
    segments: np.ndarray  # (n,) segment ids


def ingest_samples(points, raster: Raster, segments: SegmentMap, features: np.ndarray) -> SampleRows:
    """Map each point to its pixel and segment; points sharing a segment collapse
    to one row carrying the majority label (tie -> urban)."""
    if segments.labels.shape != (raster.height, raster.width):
        raise ShapeError("segment map does not match the raster")
    if len(features) != segments.count:
        raise ShapeError(f"{len(features)} feature rows for {segments.count} segments")
    votes: dict[int, list[int]] = {}
    outside = []
    for p in points:
        col, row = raster.geo.to_pixel(p.x, p.y)
        c, r = math.floor(col), math.floor(row)
        if not (0 <= c < raster.width and 0 <= r < raster.height):
            outside.append(p)
            continue
        seg = int(segments.labels[r, c])
        votes.setdefault(seg, [0, 0])[p.label] += 1
    if outside:
        listed = ", ".join(f"({p.x}, {p.y})" for p in outside[:10])
        raise SampleError(f"{len(outside)} point(s) outside the raster extent: {listed}")
    segs = np.array(sorted(votes), dtype=np.int64)
    labels = np.array([NONURBAN if votes[s][1] > votes[s][0] else URBAN for s in segs], dtype=np.int64)
    return SampleRows(features[segs] if len(segs) else np.zeros((0, features.shape[1])), labels, segs)


# --------------------------------------------------------------------------
# forest


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int = 12
    min_leaf: int = 2
    features_per_split: int | None = None  # None -> ceil(sqrt(F))
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ConfigError("max_depth must be >= 1")
        if self.min_leaf < 1:
            raise ConfigError("min_leaf must be >= 1")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ConfigError("features_per_split must be >= 1")

    def split_features(self, n_features: int) -> int:
        m = self.features_per_split or math.ceil(math.sqrt(n_features))
        return min(m, n_features)


@dataclass
class Tree:
    """Flat node arrays. Internal nodes send x[feature] <= threshold left."""

    feature: np.ndarray  # int32, -1 on leaves
    threshold: np.ndarray  # float64
    left: np.ndarray  # int32 child index, -1 on leaves
    right: np.ndarray
    leaf_class: np.ndarray  # int8, -1 on internal nodes

    @property
    def node_count(self) -> int:
        return len(self.feature)

    def predict(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(len(x), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            n = node[idx]
            go_left = x[idx, self.feature[n]] <= self.threshold[n]
            node[idx] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return self.leaf_class[node].astype(np.int64)

    def equals(self, other: "Tree") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("feature", "threshold", "left", "right", "leaf_class"))


def _majority(counts) -> int:
    return NONURBAN if counts[1] > counts[0] else URBAN


def _best_split(x: np.ndarray, y: np.ndarray, feats, min_leaf: int):
    """Lowest weighted Gini over midpoints between distinct sorted values."""
    n = len(y)
    best = (np.inf, -1, 0.0)
    for f in feats:
        order = np.argsort(x[:, f], kind="stable")
        xs, ys = x[order, f], y[order]
        ones_left = np.cumsum(ys)[:-1]
        n_left = np.arange(1, n)
        n_right = n - n_left
        ones_right = ys.sum() - ones_left
        p_l = ones_left / n_left
        p_r = ones_right / n_right
        gini = (n_left * 2 * p_l * (1 - p_l) + n_right * 2 * p_r * (1 - p_r)) / n
        ok = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n_right >= min_leaf)
        if not ok.any():
            continue
        gini = np.where(ok, gini, np.inf)
        i = int(np.argmin(gini))
        if gini[i] < best[0]:
            best = (float(gini[i]), int(f), float(0.5 * (xs[i] + xs[i + 1])))
    return best


def grow_tree(x: np.ndarray, y: np.ndarray, cfg: ForestConfig, rng: np.random.Generator) -> Tree:
    n, nf = x.shape
    m = cfg.split_features(nf)
    feature, threshold, left, right, leaf = [], [], [], [], []

    def new_node():
        for arr, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (leaf, -1)):
            arr.append(v)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        ys = y[idx]
        counts = (int((ys == 0).sum()), int((ys == 1).sum()))
        if depth >= cfg.max_depth or min(counts) == 0 or len(idx) < 2 * cfg.min_leaf:
            leaf[node] = _majority(counts)
            continue
        feats = rng.choice(nf, size=m, replace=False)
        gini, f, t = _best_split(x[idx], ys, feats, cfg.min_leaf)
        if f < 0:
            leaf[node] = _majority(counts)
            continue
        go_left = x[idx, f] <= t
        lnode, rnode = new_node(), new_node()
        feature[node], threshold[node], left[node], right[node] = f, t, lnode, rnode
        # push right first so the left subtree is numbered first
        stack.append((rnode, idx[~go_left], depth + 1))
        stack.append((lnode, idx[go_left], depth + 1))
    return Tree(np.array(feature, np.int32), np.array(threshold, np.float64),
                np.array(left, np.int32), np.array(right, np.int32), np.array(leaf, np.int8))


@dataclass
class Forest:
    trees: list[Tree]
    n_features: int

    def votes(self, x: np.ndarray) -> np.ndarray:
        """Per-sample count of nonurban votes."""
        x = np.asarray(x, np.float64)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise ShapeError(f"forest expects {self.n_features} features, got shape {x.shape}")
        return sum((t.predict(x) for t in self.trees), np.zeros(len(x), np.int64))

    def predict(self, x: np.ndarray) -> np.ndarray:
        # strict majority for nonurban; ties go to urban
        return (2 * self.votes(x) > len(self.trees)).astype(np.int64)

    def equals(self, other: "Forest") -> bool:
        return (self.n_features == other.n_features and len(self.trees) == len(other.trees)
                and all(a.equals(b) for a, b in zip(self.trees, other.trees)))


def fit_forest(x: np.ndarray, y: np.ndarray, cfg: ForestConfig = ForestConfig(),
               threads: int = 1) -> Forest:
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.int64)
    if x.ndim != 2 or len(x) != len(y) or len(y) == 0:
        raise ShapeError(f"features {x.shape} and labels {y.shape} do not line up")
    if set(np.unique(y)) - {0, 1}:
        raise ValueError("labels must be 0 or 1")
    if len(np.unique(y)) < 2:
        raise DegenerateSplit("training data holds a single class")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees)

    def one(ss):
        rng = np.random.default_rng(ss)
        idx = rng.integers(0, len(y), len(y)) if cfg.bootstrap else np.arange(len(y))
        return grow_tree(x[idx], y[idx], cfg, rng)

    if threads > 1 and cfg.n_trees > 1:
        with ThreadPoolExecutor(threads) as pool:
            trees = list(pool.map(one, seeds))
    else:
        trees = [one(s) for s in seeds]
    return Forest(trees, x.shape[1])


def stratified_split(y: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle each class under ``seed`` and put round(fraction * n_c) rows in training."""
    if not 0 < fraction < 1:
        raise ConfigError("split fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in (URBAN, NONURBAN):
        idx = rng.permutation(np.nonzero(y == c)[0])
        k = int(round(fraction * len(idx)))
        train.append(idx[:k])
        test.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


@dataclass
class ForestFit:
    forest: Forest
    train_index: np.ndarray
    test_index: np.ndarray
    held_out: Confusion | None  # positive class = urban; None if the test split is empty

    def held_out_accuracy(self) -> float | None:
        c = self.held_out
        return None if c is None else (c.tp + c.tn) / c.n


def urban_confusion(pred: np.ndarray, truth: np.ndarray) -> Confusion:
    """Confusion with urban as the positive class."""
    return confusion((np.asarray(pred) == URBAN).astype(np.uint8),
                     (np.asarray(truth) == URBAN).astype(np.uint8))


def train_forest(rows: SampleRows | tuple, split_fraction: float = 0.7,
                 cfg: ForestConfig = ForestConfig(), threads: int = 1) -> ForestFit:
    x, y = (rows.features, rows.labels) if isinstance(rows, SampleRows) else rows
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.int64)
    train_idx, test_idx = stratified_split(y, split_fraction, cfg.seed)
    if len(np.unique(y[train_idx])) < 2:
        raise DegenerateSplit("training split holds a single class")
    forest = fit_forest(x[train_idx], y[train_idx], cfg, threads)
    held = None
    if len(test_idx):
        held = urban_confusion(forest.predict(x[test_idx]), y[test_idx])
    return ForestFit(forest, train_idx, test_idx, held)


def classify_segments(forest: Forest, features: np.ndarray, segments: SegmentMap | None = None):
    """Label every segment; with a segment map also return the per-pixel raster labels."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != forest.n_features:
        raise ShapeError(f"features have {features.shape[-1]} columns, forest expects {forest.n_features}")
    labels = forest.predict(features)
    if segments is None:
        return labels
    if segments.count != len(labels):
        raise ShapeError(f"{len(labels)} segment labels for {segments.count} segments")
    return labels, labels[segments.labels].astype(np.uint8)


def landcover_raster(pixels: np.ndarray, geo: GeoTransform) -> Raster:
    return Raster(pixels.astype(np.int32)[None], geo, ("landcover",))


# --------------------------------------------------------------------------
# persistence: "RFOR", u32 version, u32 feature count, u32 tree count, then per
# tree u32 node count and the node arrays (i32 feature, f64 threshold, i32 left,
# i32 right, i8 leaf class), all little-endian


def save_forest(forest: Forest, path) -> None:
    parts = [FOREST_MAGIC, struct.pack("<III", FOREST_VERSION, forest.n_features, len(forest.trees))]
    for t in forest.trees:
        parts.append(struct.pack("<I", t.node_count))
        parts += [t.feature.astype("<i4").tobytes(), t.threshold.astype("<f8").tobytes(),
                  t.left.astype("<i4").tobytes(), t.right.astype("<i4").tobytes(),
                  t.leaf_class.astype("i1").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_forest(path) -> Forest:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFile(f"{path}: forest file truncated at byte {pos}")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != FOREST_MAGIC:
        raise ParseError(f"{path}: not a forest file (bad magic)")
    version, n_features, n_trees = struct.unpack("<III", take(12))
    if version != FOREST_VERSION:
        raise IncompatibleCheckpoint(f"{path}: forest version {version}, expected {FOREST_VERSION}")
    trees = []
    for _ in range(n_trees):
        (n,) = struct.unpack("<I", take(4))
        feature = np.frombuffer(take(4 * n), "<i4").astype(np.int32)
        threshold = np.frombuffer(take(8 * n), "<f8").astype(np.float64)
        left = np.frombuffer(take(4 * n), "<i4").astype(np.int32)
        right = np.frombuffer(take(4 * n), "<i4").astype(np.int32)
        leaf = np.frombuffer(take(n), "i1").astype(np.int8)
        if n == 0 or feature.max(initial=-1) >= n_features or max(left.max(), right.max()) >= n:
            raise ParseError(f"{path}: corrupt tree node arrays")
        trees.append(Tree(feature, threshold, left, right, leaf))
    if pos != len(buf):
        raise ParseError(f"{path}: {len(buf) - pos} trailing bytes")
    return Forest(trees, n_features)
