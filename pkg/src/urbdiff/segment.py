"""SLIC superpixels over multispectral rasters and per-segment features."""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from urbdiff.errors import ConfigError, ShapeError
from urbdiff.raster import GeoTransform, Raster

log = logging.getLogger(__name__)

NDVI_EPS = 1e-6


@dataclass(frozen=True)
class SlicConfig:
    n_segments: int = 750000
    compactness: float = 0.1
    max_iters: int = 10
    enforce_connectivity: bool = True

    def __post_init__(self):
        if self.n_segments < 1:
            raise ConfigError("n_segments must be >= 1")
        if self.compactness <= 0:
            raise ConfigError("compactness must be > 0")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")


@dataclass
class SegmentMap:
    labels: np.ndarray  # (H, W) int32, ids dense in [0, count)
    energy: list[float] = field(default_factory=list)  # k-means energy after each iteration

    @property
    def count(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.count)

    def to_raster(self, geo: GeoTransform = GeoTransform()) -> Raster:
        return Raster(self.labels.astype(np.int32)[None], geo, ("segment",))


def _standardize(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    for i, band in enumerate(x):
        band = band.astype(np.float64)
        sd = band.std()
        out[i] = (band - band.mean()) / sd if sd > 0 else band - band.mean()
    return out


def _gradient_energy(x: np.ndarray) -> np.ndarray:
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    dx = p[:, 1:-1, 2:] - p[:, 1:-1, :-2]
    dy = p[:, 2:, 1:-1] - p[:, :-2, 1:-1]
    return (dx * dx + dy * dy).sum(axis=0)


def grid_seeds(height: int, width: int, k: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Regular seed grid with spacing S = sqrt(N / k); seeds sit at cell centres."""
    step = math.sqrt(height * width / k)
    nx = max(1, int(round(width / step)))
    ny = max(1, int(round(height / step)))
    xs = (np.arange(nx) + 0.5) * width / nx - 0.5
    ys = (np.arange(ny) + 0.5) * height / ny - 0.5
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    return cy.ravel(), cx.ravel(), step


def _perturb(cy, cx, grad):
    h, w = grad.shape
    cy, cx = cy.copy(), cx.copy()
    for i in range(len(cy)):
        r = min(max(int(round(cy[i])), 0), h - 1)
        c = min(max(int(round(cx[i])), 0), w - 1)
        best, pos = grad[r, c], None
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and grad[rr, cc] < best:
                    best, pos = grad[rr, cc], (rr, cc)
        if pos is not None:
            cy[i], cx[i] = pos
    return cy, cx


def _distance2(x, yy, xx, cy, cx, cf, spatial):
    spectral = ((x - cf[:, None, None]) ** 2).sum(axis=0)
    return spectral + ((yy - cy) ** 2 + (xx - cx) ** 2) * spatial


def slic(r: Raster, cfg: SlicConfig = SlicConfig(), standardize: bool = True) -> SegmentMap:
    """Simple linear iterative clustering.

    Distance D^2 = d_spectral^2 + (d_spatial / S)^2 m^2 on z-scored bands,
    with each centre searching a window of +/- S pixels. Every pixel also
    keeps its current centre as a candidate, which makes the k-means energy
    non-increasing from one iteration to the next.
    """
    h, w = r.height, r.width
    n = h * w
    if cfg.n_segments > n:
        raise ConfigError(f"n_segments {cfg.n_segments} exceeds the pixel count {n}")
    x = _standardize(r.samples) if standardize else r.samples.astype(np.float64)
    cy, cx, step = grid_seeds(h, w, cfg.n_segments)
    if step >= 3:
        # with spacing >= 3 the 3x3 neighbourhoods of distinct seeds cannot collide
        cy, cx = _perturb(cy, cx, _gradient_energy(x))
    spatial = cfg.compactness**2 / step**2
    k = len(cy)
    ri = np.clip(np.round(cy).astype(int), 0, h - 1)
    ci = np.clip(np.round(cx).astype(int), 0, w - 1)
    cf = x[:, ri, ci].T.copy()  # (k, B)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    labels = np.full((h, w), -1, np.int64)
    energy = []
    reach = int(math.ceil(step))
    for _ in range(cfg.max_iters):
        best = np.full((h, w), np.inf)
        assigned = labels >= 0
        if assigned.any():
            lab = labels[assigned]
            d = ((x[:, assigned].T - cf[lab]) ** 2).sum(axis=1)
            d += ((yy[assigned] - cy[lab]) ** 2 + (xx[assigned] - cx[lab]) ** 2) * spatial
            best[assigned] = d
        for i in range(k):
            r0 = max(int(math.floor(cy[i])) - reach, 0)
            r1 = min(int(math.ceil(cy[i])) + reach + 1, h)
            c0 = max(int(math.floor(cx[i])) - reach, 0)
            c1 = min(int(math.ceil(cx[i])) + reach + 1, w)
            if r0 >= r1 or c0 >= c1:
                continue
            d = _distance2(x[:, r0:r1, c0:c1], yy[r0:r1, c0:c1], xx[r0:r1, c0:c1],
                           cy[i], cx[i], cf[i], spatial)
            win = best[r0:r1, c0:c1]
            better = d < win
            win[better] = d[better]
            labels[r0:r1, c0:c1][better] = i
        # update: centres become the means of their members
        flat = labels.ravel()
        counts = np.bincount(flat, minlength=k).astype(np.float64)
        live = counts > 0
        cy[live] = (np.bincount(flat, yy.ravel(), k) / np.maximum(counts, 1))[live]
        cx[live] = (np.bincount(flat, xx.ravel(), k) / np.maximum(counts, 1))[live]
        for b in range(x.shape[0]):
            cf[live, b] = (np.bincount(flat, x[b].ravel(), k) / np.maximum(counts, 1))[live]
        d = ((x.reshape(x.shape[0], -1).T - cf[flat]) ** 2).sum(axis=1)
        d += ((yy.ravel() - cy[flat]) ** 2 + (xx.ravel() - cx[flat]) ** 2) * spatial
        energy.append(float(d.sum()))
    if cfg.enforce_connectivity:
        labels = enforce_connectivity(labels, max(1, int(step * step / 4)))
    return SegmentMap(relabel_dense(labels), energy)


def relabel_dense(labels: np.ndarray) -> np.ndarray:
    """Renumber ids to 0..k'-1 in order of first appearance (row-major)."""
    _, first, inverse = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    rank = np.argsort(np.argsort(first))
    return rank[inverse].reshape(labels.shape).astype(np.int32)


def connected_components(labels: np.ndarray) -> np.ndarray:
    """4-connected components of equal-label regions, numbered from 0."""
    comp = np.full(labels.shape, -1, np.int64)
    nxt = 0
    ids = labels - labels.min() + 1
    for lab, sl in enumerate(ndimage.find_objects(ids), start=1):
        if sl is None:
            continue
        sub, nsub = ndimage.label(ids[sl] == lab)
        view = comp[sl]
        mask = sub > 0
        view[mask] = sub[mask] - 1 + nxt
        nxt += nsub
    return comp


def enforce_connectivity(labels: np.ndarray, min_size: int) -> np.ndarray:
    """Split disconnected segments and merge components smaller than ``min_size``
    into their largest 4-adjacent neighbour."""
    comp = connected_components(labels)
    n = int(comp.max()) + 1
    size = np.bincount(comp.ravel(), minlength=n)
    pairs = np.concatenate([
        np.stack([comp[:, :-1].ravel(), comp[:, 1:].ravel()], axis=1),
        np.stack([comp[:-1, :].ravel(), comp[1:, :].ravel()], axis=1),
    ])
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    pairs = np.unique(np.sort(pairs, axis=1), axis=0)
    neighbours: list[set[int]] = [set() for _ in range(n)]
    for a, b in pairs:
        neighbours[a].add(int(b))
        neighbours[b].add(int(a))
    parent = np.arange(n)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for c in np.argsort(size, kind="stable"):
        c = find(int(c))
        if size[c] >= min_size:
            continue
        adj = {find(j) for j in neighbours[c]} - {c}
        if not adj:
            continue
        target = max(adj, key=lambda j: (size[j], -j))
        parent[c] = target
        size[target] += size[c]
        neighbours[target] |= neighbours[c]
    roots = np.array([find(i) for i in range(n)])
    return roots[comp]


# --------------------------------------------------------------------------
# features


def _canonical_band(name: str) -> str:
    # "B04" and "B4" name the same Sentinel-2 band
    m = re.fullmatch(r"[Bb]0*(\d+[Aa]?)", str(name))
    return "B" + m.group(1).upper() if m else str(name)


def _band_index(r: Raster, role) -> int:
    if isinstance(role, int):
        if not 0 <= role < r.bands:
            raise ConfigError(f"band index {role} out of range for {r.bands} bands")
        return role
    ids = [_canonical_band(b) for b in r.band_ids]
    try:
        return ids.index(_canonical_band(role))
    except ValueError:
        raise ConfigError(f"band role {role!r} not among band ids {r.band_ids}") from None


def superpixel_features(r: Raster, s: SegmentMap, red="B4", nir="B8") -> np.ndarray:
    """Per-segment feature rows: band means, band standard deviations, mean NDVI.

    ``red`` and ``nir`` name the bands (by id or index) used for NDVI. The
    result has shape (segments, 2 * bands + 1).
    """
    if s.labels.shape != (r.height, r.width):
        raise ShapeError(f"segment map {s.labels.shape} does not match raster {r.height}x{r.width}")
    ir, inir = _band_index(r, red), _band_index(r, nir)
    flat = s.labels.ravel()
    k = s.count
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    x = r.samples.reshape(r.bands, -1).astype(np.float64)
    means = np.stack([np.bincount(flat, band, k) / counts for band in x], axis=1)
    stds = np.stack([
        np.sqrt(np.bincount(flat, (band - means[flat, b]) ** 2, k) / counts)
        for b, band in enumerate(x)
    ], axis=1)
    red_v, nir_v = x[ir], x[inir]
    ndvi = (nir_v - red_v) / (nir_v + red_v + NDVI_EPS)
    ndvi_mean = np.bincount(flat, ndvi, k) / counts
    return np.concatenate([means, stds, ndvi_mean[:, None]], axis=1)


def feature_names(r: Raster) -> list[str]:
    return [f"mean_{b}" for b in r.band_ids] + [f"std_{b}" for b in r.band_ids] + ["ndvi_mean"]
