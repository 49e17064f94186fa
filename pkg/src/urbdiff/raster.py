"""Raster data model and I/O.

Supports a deliberately small set of on-disk formats:

* baseline little-endian TIFF, uncompressed, strip organised, one sample per
  pixel (uint8, uint16 or float32), with the two GeoTIFF tags carrying pixel
  scale and tiepoint;
* an internal exchange format made of a JSON sidecar header
  (``<name>.hdr.json``) and a raw little-endian band-major binary
  (``<name>.band.f32``);
* geoJSON Polygon geometries (exterior ring only) for areas of interest.
"""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from urbdiff.errors import (
    AlignmentError,
    DegenerateBand,
    OutOfBounds,
    ParseError,
    TruncatedFile,
    UnsupportedFormat,
)

#: Ground sampling distance of the Sentinel-2 bands consumed by the pipeline.
SENTINEL2_10M = 10.0

GEO_TOLERANCE = 1e-6

HEADER_SUFFIX = ".hdr.json"
DATA_SUFFIX = ".band.f32"


@dataclass(frozen=True)
class GeoTransform:
    origin_x: float = 0.0
    origin_y: float = 0.0
    pixel_size_x: float = 1.0
    pixel_size_y: float = -1.0

    def __post_init__(self):
        if self.pixel_size_x == 0 or self.pixel_size_y == 0:
            raise ValueError("pixel sizes must be non-zero")

    def pixel_area(self) -> float:
        return abs(self.pixel_size_x * self.pixel_size_y)

    def to_pixel(self, x: float, y: float) -> tuple[float, float]:
        """Map coordinates to fractional (col, row) pixel coordinates."""
        return (x - self.origin_x) / self.pixel_size_x, (y - self.origin_y) / self.pixel_size_y

    def to_map(self, col: float, row: float) -> tuple[float, float]:
        return self.origin_x + col * self.pixel_size_x, self.origin_y + row * self.pixel_size_y

    def shifted(self, col: int, row: int) -> "GeoTransform":
        x, y = self.to_map(col, row)
        return GeoTransform(x, y, self.pixel_size_x, self.pixel_size_y)

    def almost_equal(self, other: "GeoTransform", tol: float = GEO_TOLERANCE) -> bool:
        a = (self.origin_x, self.origin_y, self.pixel_size_x, self.pixel_size_y)
        b = (other.origin_x, other.origin_y, other.pixel_size_x, other.pixel_size_y)
        return all(abs(p - q) <= tol for p, q in zip(a, b))

    def as_dict(self) -> dict:
        return {
            "origin_x": self.origin_x,
            "origin_y": self.origin_y,
            "pixel_size_x": self.pixel_size_x,
            "pixel_size_y": self.pixel_size_y,
        }


@dataclass(frozen=True)
class Raster:
    """A georeferenced multi-band image.

    ``samples`` is a read-only ``(bands, height, width)`` float32 array.
    """

    samples: np.ndarray
    geo: GeoTransform = field(default_factory=GeoTransform)
    band_ids: tuple[str, ...] = ()

    def __post_init__(self):
        arr = np.asarray(self.samples)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] < 1:
            raise ValueError(f"samples must be (bands, height, width), got {arr.shape}")
        if arr.dtype not in (np.float32, np.int32):
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("raster samples must be finite")
        arr = np.array(arr, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        ids = tuple(self.band_ids) or tuple(f"band{i + 1}" for i in range(arr.shape[0]))
        if len(ids) != arr.shape[0]:
            raise ValueError(f"{len(ids)} band ids for {arr.shape[0]} bands")
        object.__setattr__(self, "band_ids", ids)

    @property
    def bands(self) -> int:
        return self.samples.shape[0]

    @property
    def height(self) -> int:
        return self.samples.shape[1]

    @property
    def width(self) -> int:
        return self.samples.shape[2]

    def pixel_area(self) -> float:
        return self.geo.pixel_area()

    def band(self, index: int) -> np.ndarray:
        return self.samples[index]


@dataclass(frozen=True)
class AoiPolygon:
    ring: tuple[tuple[float, float], ...]

    def __post_init__(self):
        ring = tuple((float(x), float(y)) for x, y in self.ring)
        if len(ring) < 4:
            raise ValueError("an AOI ring needs at least 4 vertices")
        if ring[0] != ring[-1]:
            raise ValueError("AOI ring must be closed (first vertex == last)")
        object.__setattr__(self, "ring", ring)
        xmin, ymin, xmax, ymax = self.bounds()
        if not (xmax > xmin and ymax > ymin):
            raise ValueError("AOI bounding box must have positive width and height")

    def bounds(self) -> tuple[float, float, float, float]:
        xs = [p[0] for p in self.ring]
        ys = [p[1] for p in self.ring]
        return min(xs), min(ys), max(xs), max(ys)

    @classmethod
    def from_bounds(cls, xmin, ymin, xmax, ymax) -> "AoiPolygon":
        return cls(((xmin, ymin), (xmax, ymin), (xmax, ymax), (xmin, ymax), (xmin, ymin)))

    def to_wkt(self) -> str:
        coords = ", ".join(f"{_fmt_num(x)} {_fmt_num(y)}" for x, y in self.ring)
        return f"POLYGON(({coords}))"


def _fmt_num(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


# --------------------------------------------------------------------------
# geoJSON


def read_geojson_aoi(path) -> AoiPolygon:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: not valid JSON ({exc})") from exc
    return parse_geojson_aoi(doc)


def parse_geojson_aoi(doc) -> AoiPolygon:
    """Extract the exterior ring of a single Polygon.

    Accepts a bare geometry, a Feature, or a FeatureCollection holding exactly
    one feature. MultiPolygons and polygons with holes are rejected.
    """
    if not isinstance(doc, dict):
        raise ParseError("geoJSON document must be an object")
    kind = doc.get("type")
    if kind == "FeatureCollection":
        feats = doc.get("features") or []
        if len(feats) != 1:
            raise ParseError(f"expected exactly one feature, found {len(feats)}")
        return parse_geojson_aoi(feats[0])
    if kind == "Feature":
        return parse_geojson_aoi(doc.get("geometry") or {})
    if kind == "MultiPolygon":
        raise UnsupportedFormat("MultiPolygon AOIs are not supported")
    if kind != "Polygon":
        raise ParseError(f"expected a Polygon geometry, got {kind!r}")
    rings = doc.get("coordinates")
    if not isinstance(rings, list) or not rings:
        raise ParseError("Polygon has no coordinates")
    if len(rings) > 1:
        raise UnsupportedFormat("polygons with holes are not supported")
    try:
        ring = tuple((float(p[0]), float(p[1])) for p in rings[0])
        return AoiPolygon(ring)
    except (TypeError, IndexError, ValueError) as exc:
        raise ParseError(f"invalid Polygon ring: {exc}") from exc


def aoi_to_geojson(aoi: AoiPolygon) -> dict:
    return {"type": "Polygon", "coordinates": [[list(p) for p in aoi.ring]]}


# --------------------------------------------------------------------------
# TIFF subset

_TIFF_TYPES = {
    # type id: (struct code, size)
    1: ("B", 1),
    2: ("c", 1),
    3: ("H", 2),
    4: ("I", 4),
    5: ("II", 8),
    6: ("b", 1),
    8: ("h", 2),
    9: ("i", 4),
    11: ("f", 4),
    12: ("d", 8),
    16: ("Q", 8),
}

TAG_WIDTH = 256
TAG_HEIGHT = 257
TAG_BITS = 258
TAG_COMPRESSION = 259
TAG_PHOTOMETRIC = 262
TAG_STRIP_OFFSETS = 273
TAG_SAMPLES_PER_PIXEL = 277
TAG_ROWS_PER_STRIP = 278
TAG_STRIP_BYTE_COUNTS = 279
TAG_PLANAR = 284
TAG_TILE_WIDTH = 322
TAG_TILE_OFFSETS = 324
TAG_SAMPLE_FORMAT = 339
TAG_PIXEL_SCALE = 33550
TAG_TIEPOINT = 33922


def _read_ifd(buf: bytes, offset: int) -> dict[int, tuple]:
    if offset + 2 > len(buf):
        raise ParseError("IFD offset beyond end of file")
    (count,) = struct.unpack_from("<H", buf, offset)
    if offset + 2 + 12 * count > len(buf):
        raise ParseError("IFD entries run past end of file")
    tags = {}
    for i in range(count):
        tag, typ, n, raw = struct.unpack_from("<HHI4s", buf, offset + 2 + 12 * i)
        if typ not in _TIFF_TYPES:
            raise ParseError(f"tag {tag} has unknown field type {typ}")
        code, size = _TIFF_TYPES[typ]
        nbytes = size * n
        if nbytes <= 4:
            data = raw[:nbytes]
        else:
            (ptr,) = struct.unpack("<I", raw)
            if ptr + nbytes > len(buf):
                raise ParseError(f"tag {tag} value runs past end of file")
            data = buf[ptr : ptr + nbytes]
        if typ == 2:
            tags[tag] = (data.rstrip(b"\0").decode("ascii", "replace"),)
        elif typ == 5:
            vals = struct.unpack(f"<{2 * n}I", data)
            tags[tag] = tuple(vals[k] / vals[k + 1] for k in range(0, len(vals), 2))
        else:
            tags[tag] = struct.unpack(f"<{n}{code}", data)
    return tags


def _tiff_dtype(bits: int, sample_format: int) -> np.dtype:
    if sample_format == 1 and bits == 8:
        return np.dtype("<u1")
    if sample_format == 1 and bits == 16:
        return np.dtype("<u2")
    if sample_format == 3 and bits == 32:
        return np.dtype("<f4")
    raise UnsupportedFormat(f"unsupported sample type: {bits}-bit, format {sample_format}")


def load_tiff_band(path, band_id: str | None = None) -> Raster:
    """Read a single-band baseline TIFF (see module docstring for the subset)."""
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise ParseError(f"{path}: file too short for a TIFF header")
    order = buf[:2]
    if order == b"MM":
        raise UnsupportedFormat(f"{path}: big-endian TIFF is not supported")
    if order != b"II":
        raise ParseError(f"{path}: bad byte-order mark {order!r}")
    magic, ifd_offset = struct.unpack_from("<HI", buf, 2)
    if magic == 43:
        raise UnsupportedFormat(f"{path}: BigTIFF is not supported")
    if magic != 42:
        raise ParseError(f"{path}: bad TIFF magic {magic}")
    tags = _read_ifd(buf, ifd_offset)

    for required in (TAG_WIDTH, TAG_HEIGHT):
        if required not in tags:
            raise ParseError(f"{path}: missing required tag {required}")
    width, height = int(tags[TAG_WIDTH][0]), int(tags[TAG_HEIGHT][0])
    if width <= 0 or height <= 0:
        raise ParseError(f"{path}: non-positive image size {width}x{height}")
    if tags.get(TAG_COMPRESSION, (1,))[0] != 1:
        raise UnsupportedFormat(f"{path}: compressed TIFF (compression={tags[TAG_COMPRESSION][0]})")
    if TAG_TILE_WIDTH in tags or TAG_TILE_OFFSETS in tags:
        raise UnsupportedFormat(f"{path}: tiled TIFF layout is not supported")
    if tags.get(TAG_SAMPLES_PER_PIXEL, (1,))[0] != 1:
        raise UnsupportedFormat(f"{path}: only one sample per pixel is supported")
    bits = tags.get(TAG_BITS, (1,))[0]
    dtype = _tiff_dtype(bits, tags.get(TAG_SAMPLE_FORMAT, (1,))[0])

    if TAG_STRIP_OFFSETS not in tags or TAG_STRIP_BYTE_COUNTS not in tags:
        raise TruncatedFile(f"{path}: no strip offsets/byte counts")
    offsets = tags[TAG_STRIP_OFFSETS]
    counts = tags[TAG_STRIP_BYTE_COUNTS]
    if len(offsets) != len(counts):
        raise ParseError(f"{path}: strip offset/count length mismatch")
    rows_per_strip = min(int(tags.get(TAG_ROWS_PER_STRIP, (height,))[0]), height)
    n_strips = math.ceil(height / rows_per_strip)
    if len(offsets) < n_strips:
        raise TruncatedFile(f"{path}: expected {n_strips} strips, found {len(offsets)}")

    row_bytes = width * dtype.itemsize
    chunks = []
    remaining = height
    for off, cnt in zip(offsets[:n_strips], counts[:n_strips]):
        rows = min(rows_per_strip, remaining)
        need = rows * row_bytes
        if cnt < need or off + need > len(buf):
            raise TruncatedFile(f"{path}: strip at offset {off} is truncated")
        chunks.append(buf[off : off + need])
        remaining -= rows
    data = np.frombuffer(b"".join(chunks), dtype=dtype).reshape(height, width)

    geo = GeoTransform()
    if TAG_PIXEL_SCALE in tags and TAG_TIEPOINT in tags:
        sx, sy = tags[TAG_PIXEL_SCALE][:2]
        ti, tj, _, tx, ty, _ = tags[TAG_TIEPOINT][:6]
        geo = GeoTransform(tx - ti * sx, ty + tj * sy, sx, -sy)
    return Raster(data.astype(np.float32), geo, (band_id or Path(path).stem,))


def write_tiff_band(path, data: np.ndarray, geo: GeoTransform | None = None,
                    rows_per_strip: int | None = None) -> None:
    """Write a 2-D array as a baseline single-band TIFF.

    ``data`` must be uint8, uint16 or float32. North-up geotransforms only.
    """
    arr = np.ascontiguousarray(data)
    if arr.ndim != 2:
        raise ValueError("write_tiff_band expects a 2-D array")
    formats = {np.dtype("uint8"): (8, 1), np.dtype("uint16"): (16, 1), np.dtype("float32"): (32, 3)}
    if arr.dtype not in formats:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    bits, sample_format = formats[arr.dtype]
    arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    height, width = arr.shape
    rps = rows_per_strip or height
    strips = [arr[r : r + rps].tobytes() for r in range(0, height, rps)]

    entries = []  # (tag, type, values)
    entries.append((TAG_WIDTH, 4, [width]))
    entries.append((TAG_HEIGHT, 4, [height]))
    entries.append((TAG_BITS, 3, [bits]))
    entries.append((TAG_COMPRESSION, 3, [1]))
    entries.append((TAG_PHOTOMETRIC, 3, [1]))
    entries.append((TAG_STRIP_OFFSETS, 4, [0] * len(strips)))
    entries.append((TAG_SAMPLES_PER_PIXEL, 3, [1]))
    entries.append((TAG_ROWS_PER_STRIP, 4, [rps]))
    entries.append((TAG_STRIP_BYTE_COUNTS, 4, [len(s) for s in strips]))
    entries.append((TAG_SAMPLE_FORMAT, 3, [sample_format]))
    if geo is not None:
        if geo.pixel_size_y >= 0:
            raise ValueError("only north-up geotransforms can be written")
        entries.append((TAG_PIXEL_SCALE, 12, [geo.pixel_size_x, -geo.pixel_size_y, 0.0]))
        entries.append((TAG_TIEPOINT, 12, [0.0, 0.0, 0.0, geo.origin_x, geo.origin_y, 0.0]))

    ifd_offset = 8
    ifd_size = 2 + 12 * len(entries) + 4
    extra_offset = ifd_offset + ifd_size
    extra = bytearray()
    # first pass to place out-of-line values; strip offsets patched afterwards
    data_start = None
    encoded = []
    for tag, typ, values in entries:
        code, size = _TIFF_TYPES[typ]
        payload = struct.pack(f"<{len(values)}{code}", *values)
        encoded.append([tag, typ, len(values), payload])
    for item in encoded:
        if len(item[3]) > 4:
            item.append(extra_offset + len(extra))
            extra += item[3]
            if len(extra) % 2:
                extra += b"\0"
        else:
            item.append(None)
    data_start = extra_offset + len(extra)
    offsets, pos = [], data_start
    for s in strips:
        offsets.append(pos)
        pos += len(s)
    for item in encoded:
        if item[0] == TAG_STRIP_OFFSETS:
            item[3] = struct.pack(f"<{len(offsets)}I", *offsets)
            if item[4] is not None:
                start = item[4] - extra_offset
                extra[start : start + len(item[3])] = item[3]

    out = bytearray(b"II" + struct.pack("<HI", 42, ifd_offset))
    out += struct.pack("<H", len(encoded))
    for tag, typ, n, payload, ptr in encoded:
        if ptr is None:
            out += struct.pack("<HHI", tag, typ, n) + payload.ljust(4, b"\0")
        else:
            out += struct.pack("<HHII", tag, typ, n, ptr)
    out += struct.pack("<I", 0)
    out += extra
    for s in strips:
        out += s
    Path(path).write_bytes(bytes(out))


# --------------------------------------------------------------------------
# internal format


def _internal_base(path) -> Path:
    p = Path(path)
    name = p.name
    for suffix in (HEADER_SUFFIX, DATA_SUFFIX):
        if name.endswith(suffix):
            return p.with_name(name[: -len(suffix)])
    return p


def write_internal(r: Raster, path) -> Path:
    """Write ``r`` as ``<base>.hdr.json`` + ``<base>.band.f32``; returns the header path."""
    base = _internal_base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    dtype = "int32" if r.samples.dtype == np.int32 else "float32"
    header = {
        "width": r.width,
        "height": r.height,
        "bands": r.bands,
        "dtype": dtype,
        "geotransform": r.geo.as_dict(),
        "band_ids": list(r.band_ids),
    }
    hdr = base.with_name(base.name + HEADER_SUFFIX)
    hdr.write_text(json.dumps(header, indent=2) + "\n")
    le = "<i4" if dtype == "int32" else "<f4"
    base.with_name(base.name + DATA_SUFFIX).write_bytes(r.samples.astype(le).tobytes())
    return hdr


def read_internal(path) -> Raster:
    base = _internal_base(path)
    hdr = base.with_name(base.name + HEADER_SUFFIX)
    try:
        header = json.loads(hdr.read_text())
        width, height, bands = int(header["width"]), int(header["height"]), int(header["bands"])
        geo = GeoTransform(**header["geotransform"])
        band_ids = tuple(header.get("band_ids") or ())
        dtype = header.get("dtype", "float32")
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{hdr}: bad internal raster header ({exc})") from exc
    if dtype not in ("float32", "int32"):
        raise UnsupportedFormat(f"{hdr}: unknown dtype {dtype!r}")
    raw = base.with_name(base.name + DATA_SUFFIX).read_bytes()
    expected = 4 * width * height * bands
    if len(raw) != expected:
        raise TruncatedFile(f"{base}{DATA_SUFFIX}: expected {expected} bytes, found {len(raw)}")
    le = "<i4" if dtype == "int32" else "<f4"
    samples = np.frombuffer(raw, dtype=le).reshape(bands, height, width)
    return Raster(samples.astype(np.int32 if dtype == "int32" else np.float32), geo, band_ids)


def read_raster(path, band_id: str | None = None) -> Raster:
    """Open a raster in either supported format, dispatching on the file name."""
    p = Path(path)
    if p.suffix.lower() in (".tif", ".tiff"):
        return load_tiff_band(p, band_id)
    base = _internal_base(p)
    if base.with_name(base.name + HEADER_SUFFIX).exists():
        return read_internal(base)
    raise FileNotFoundError(f"no raster found at {path}")


def raster_exists(path) -> bool:
    p = Path(path)
    if p.suffix.lower() in (".tif", ".tiff"):
        return p.is_file()
    base = _internal_base(p)
    return base.with_name(base.name + HEADER_SUFFIX).is_file()


# --------------------------------------------------------------------------
# operations


def merge_bands(bands: Sequence[Raster]) -> Raster:
    if not bands:
        raise ValueError("merge_bands needs at least one raster")
    first = bands[0]
    for r in bands[1:]:
        if (r.width, r.height) != (first.width, first.height):
            raise AlignmentError(
                f"band size {r.width}x{r.height} differs from {first.width}x{first.height}"
            )
        if not r.geo.almost_equal(first.geo):
            raise AlignmentError("band geotransforms differ")
    samples = np.concatenate([r.samples for r in bands], axis=0)
    ids = tuple(i for r in bands for i in r.band_ids)
    return Raster(samples, first.geo, ids)


def split_bands(r: Raster) -> list[Raster]:
    return [Raster(r.samples[i : i + 1], r.geo, (r.band_ids[i],)) for i in range(r.bands)]


def _snap(v: float) -> float:
    n = round(v)
    return float(n) if abs(v - n) < 1e-6 else v


def crop_to_aoi(r: Raster, aoi: AoiPolygon) -> Raster:
    """Cut out the pixels covering the AOI bounding box, snapping outward."""
    xmin, ymin, xmax, ymax = aoi.bounds()
    c_a, r_a = r.geo.to_pixel(xmin, ymin)
    c_b, r_b = r.geo.to_pixel(xmax, ymax)
    c0 = math.floor(_snap(min(c_a, c_b)))
    c1 = math.ceil(_snap(max(c_a, c_b)))
    r0 = math.floor(_snap(min(r_a, r_b)))
    r1 = math.ceil(_snap(max(r_a, r_b)))
    c0, r0 = max(c0, 0), max(r0, 0)
    c1, r1 = min(c1, r.width), min(r1, r.height)
    if c1 <= c0 or r1 <= r0:
        raise OutOfBounds("AOI does not intersect the raster extent")
    return Raster(r.samples[:, r0:r1, c0:c1], r.geo.shifted(c0, r0), r.band_ids)


def normalize(r: Raster, mode: str = "zscore") -> Raster:
    """Per-band z-score (``"zscore"``) or min-max (``"minmax"``) scaling."""
    if mode not in ("zscore", "minmax"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    x = r.samples.astype(np.float64)
    out = np.empty_like(x)
    for i, band in enumerate(x):
        if mode == "zscore":
            sd = band.std()
            if sd == 0:
                warnings.warn(f"band {r.band_ids[i]} is constant; left unchanged", DegenerateBand)
                out[i] = band
            else:
                out[i] = (band - band.mean()) / sd
        else:
            lo, hi = band.min(), band.max()
            out[i] = (band - lo) / (hi - lo) if hi > lo else 0.0
    return Raster(out.astype(np.float32), r.geo, r.band_ids)
