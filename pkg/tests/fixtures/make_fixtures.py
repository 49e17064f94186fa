"""Regenerate the raster / geoJSON parser fixtures.

The TIFF files are assembled byte by byte with ``struct`` so they do not
depend on the library's own writer. Run from any directory:

    python3 tests/fixtures/make_fixtures.py
"""

import json
import struct
from pathlib import Path

HERE = Path(__file__).parent
RASTER = HERE / "raster"
GEOJSON = HERE / "geojson"

SHORT, LONG, DOUBLE = 3, 4, 12
_FMT = {SHORT: "H", LONG: "I", DOUBLE: "d"}


def tiff(width, height, pixels: bytes, bits, sample_format=1, rows_per_strip=None,
         scale=None, tiepoint=None, compression=1, spp=1, extra=(), drop=(), strip_cut=0,
         magic=42, order=b"II"):
    """Little-endian baseline TIFF with one IFD; ``pixels`` holds row-major samples."""
    rows_per_strip = rows_per_strip or height
    row_bytes = width * bits // 8
    strips = [pixels[r * row_bytes : min(r + rows_per_strip, height) * row_bytes]
              for r in range(0, height, rows_per_strip)]
    entries = [
        (256, LONG, [width]), (257, LONG, [height]), (258, SHORT, [bits]),
        (259, SHORT, [compression]), (262, SHORT, [1]), (273, LONG, [0] * len(strips)),
        (277, SHORT, [spp]), (278, LONG, [rows_per_strip]),
        (279, LONG, [len(s) for s in strips]), (339, SHORT, [sample_format]),
    ]
    if scale is not None:
        entries.append((33550, DOUBLE, list(scale)))
    if tiepoint is not None:
        entries.append((33922, DOUBLE, list(tiepoint)))
    entries += list(extra)
    entries = sorted((e for e in entries if e[0] not in drop), key=lambda e: e[0])

    ifd_offset = 8
    ifd_size = 2 + 12 * len(entries) + 4
    data_offset = ifd_offset + ifd_size
    blobs = []

    def place(blob):
        nonlocal data_offset
        off = data_offset
        blobs.append(blob)
        data_offset += len(blob) + (len(blob) & 1)
        if len(blob) & 1:
            blobs.append(b"\0")
        return off

    # strip data goes after the out-of-line tag values; compute values first
    out_of_line = {}
    for tag, typ, vals in entries:
        raw = struct.pack("<" + _FMT[typ] * len(vals), *vals)
        if len(raw) > 4 and tag != 273:
            out_of_line[tag] = place(raw)
    strip_offsets = []
    for s in strips:
        strip_offsets.append(place(s))
    if 273 in dict((e[0], e) for e in entries):
        raw = struct.pack("<" + "I" * len(strips), *strip_offsets)
        if len(raw) > 4:
            out_of_line[273] = place(raw)

    ifd = struct.pack("<H", len(entries))
    for tag, typ, vals in entries:
        if tag == 273:
            vals = strip_offsets
        raw = struct.pack("<" + _FMT[typ] * len(vals), *vals)
        if tag in out_of_line:
            ifd += struct.pack("<HHII", tag, typ, len(vals), out_of_line[tag])
        else:
            ifd += struct.pack("<HHI", tag, typ, len(vals)) + raw.ljust(4, b"\0")
    ifd += struct.pack("<I", 0)
    out = order + struct.pack("<HI", magic, ifd_offset) + ifd + b"".join(blobs)
    return out[: len(out) - strip_cut] if strip_cut else out


def main():
    RASTER.mkdir(exist_ok=True)
    GEOJSON.mkdir(exist_ok=True)
    geo = dict(scale=(10.0, 10.0, 0.0), tiepoint=(0, 0, 0, 500000.0, 1500000.0, 0.0))

    u16 = struct.pack("<4H", 0, 1, 2, 3)
    files = {
        "u16_2x2.tif": tiff(2, 2, u16, 16, **geo),
        "u8_3x2.tif": tiff(3, 2, bytes([0, 7, 255, 1, 128, 64]), 8, **geo),
        "f32_4x3_strips.tif": tiff(4, 3, struct.pack("<12f", *[i * 0.25 - 1.0 for i in range(12)]),
                                    32, sample_format=3, rows_per_strip=1, **geo),
        "u16_nogeo_2x2.tif": tiff(2, 2, u16, 16),
        "bad_magic.tif": tiff(2, 2, u16, 16, magic=0x1234, **geo),
        "bad_byteorder.tif": b"XX" + tiff(2, 2, u16, 16, **geo)[2:],
        "big_endian.tif": b"MM" + tiff(2, 2, u16, 16, **geo)[2:],
        "compressed_lzw.tif": tiff(2, 2, u16, 16, compression=5, **geo),
        "tiled.tif": tiff(2, 2, u16, 16, extra=[(322, SHORT, [16]), (323, SHORT, [16])], **geo),
        "two_samples.tif": tiff(2, 2, u16, 16, spp=2, **geo),
        "truncated_strip.tif": tiff(2, 2, u16, 16, strip_cut=3, **geo),
        "missing_strip_offsets.tif": tiff(2, 2, u16, 16, drop=(273,), **geo),
        "header_only.tif": b"II*\0",
    }
    for name, blob in files.items():
        (RASTER / name).write_bytes(blob)

    ring = [[500000.0, 1494022.0], [510000.0, 1494022.0], [510000.0, 1500000.0],
            [500000.0, 1500000.0], [500000.0, 1494022.0]]
    docs = {
        "aoi_polygon.geojson": {"type": "Polygon", "coordinates": [ring]},
        "aoi_feature_collection.geojson": {
            "type": "FeatureCollection",
            "features": [{"type": "Feature", "properties": {"name": "study area"},
                          "geometry": {"type": "Polygon", "coordinates": [ring]}}],
        },
        "multipolygon.geojson": {"type": "MultiPolygon", "coordinates": [[ring], [ring]]},
        "polygon_with_hole.geojson": {
            "type": "Polygon",
            "coordinates": [ring, [[501000.0, 1495000.0], [502000.0, 1495000.0],
                                   [502000.0, 1496000.0], [501000.0, 1495000.0]]],
        },
        "unclosed_ring.geojson": {"type": "Polygon", "coordinates": [ring[:-1]]},
        "degenerate_ring.geojson": {"type": "Polygon", "coordinates": [
            [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 0.0]]]},
    }
    for name, doc in docs.items():
        (GEOJSON / name).write_text(json.dumps(doc, indent=2) + "\n")
    (GEOJSON / "not_json.geojson").write_text('{"type": "Polygon", "coordinates": [[[0, 0], ')


if __name__ == "__main__":
    main()
