"""Catalogue queries for Sentinel-2 products and parsing of OpenSearch responses.

No network I/O happens here. Retrieval goes through a ``Fetcher``; tests and
offline runs use ``FixtureFetcher`` over recorded responses.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from urbdiff.errors import ConfigError, ParseError
from urbdiff.raster import AoiPolygon

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AcquisitionQuery:
    footprint: AoiPolygon
    date_start: dt.date
    date_end: dt.date
    platform: str = "Sentinel-2"
    product_type: str = "S2MSI1C"
    cloud_min: float = 0.0
    cloud_max: float = 20.0

    def __post_init__(self):
        if self.date_start > self.date_end:
            raise ConfigError(f"date_start {self.date_start} is after date_end {self.date_end}")
        if not 0 <= self.cloud_min <= self.cloud_max <= 100:
            raise ConfigError(f"cloud bounds must satisfy 0 <= min <= max <= 100, "
                              f"got {self.cloud_min}..{self.cloud_max}")


def _fmt_pct(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def build_query(q: AcquisitionQuery) -> str:
    """OpenSearch text query; a pure function of ``q``."""
    start = q.date_start.isoformat() + "T00:00:00Z"
    end = q.date_end.isoformat() + "T23:59:59Z"
    return " AND ".join([
        f'footprint:"Intersects({q.footprint.to_wkt()})"',
        f"beginposition:[{start} TO {end}]",
        f"platformname:{q.platform}",
        f"producttype:{q.product_type}",
        f"cloudcoverpercentage:[{_fmt_pct(q.cloud_min)} TO {_fmt_pct(q.cloud_max)}]",
    ])


@dataclass(frozen=True)
class ProductRecord:
    id: str
    title: str
    sensing_date: dt.datetime
    cloud_cover: float
    footprint_wkt: str = ""

    def as_dict(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "sensing_date": self.sensing_date.isoformat().replace("+00:00", "Z"),
            "cloud_cover": self.cloud_cover,
            "footprint_wkt": self.footprint_wkt,
        }


@dataclass
class ParsedProducts:
    records: list[ProductRecord]
    flagged: list[str] = field(default_factory=list)  # ids excluded for a missing cloud value


def _named(entry: dict, kind: str) -> dict[str, str]:
    items = entry.get(kind, [])
    if isinstance(items, dict):
        items = [items]
    if not isinstance(items, list):
        raise ParseError(f"entry field {kind!r} must be a list")
    out = {}
    for it in items:
        if not isinstance(it, dict) or "name" not in it or "content" not in it:
            raise ParseError(f"malformed {kind!r} item: {it!r}")
        out[it["name"]] = it["content"]
    return out


def _parse_time(text: str) -> dt.datetime:
    try:
        t = dt.datetime.fromisoformat(text.replace("Z", "+00:00"))
    except (AttributeError, ValueError):
        raise ParseError(f"bad timestamp {text!r}") from None
    if t.tzinfo is None:
        t = t.replace(tzinfo=dt.timezone.utc)
    return t.astimezone(dt.timezone.utc)


def parse_products_detailed(doc, cloud_max: float = 100.0) -> ParsedProducts:
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as e:
            raise ParseError(f"catalogue response is not JSON: {e}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("feed"), dict):
        raise ParseError("catalogue response has no 'feed' object")
    entries = doc["feed"].get("entry", [])
    if isinstance(entries, dict):  # single hits come back unwrapped
        entries = [entries]
    if not isinstance(entries, list):
        raise ParseError("'feed.entry' must be a list")
    records, flagged = [], []
    for i, e in enumerate(entries):
        if not isinstance(e, dict):
            raise ParseError(f"entry {i} is not an object")
        for key in ("id", "title"):
            if not isinstance(e.get(key), str):
                raise ParseError(f"entry {i} lacks a string {key!r}")
        dates = _named(e, "date")
        when = dates.get("beginposition") or dates.get("datatakesensingstart")
        if when is None:
            raise ParseError(f"entry {e['id']} has no sensing date")
        sensing = _parse_time(when)
        cloud_text = _named(e, "double").get("cloudcoverpercentage")
        if cloud_text is None:
            flagged.append(e["id"])
            warnings.warn(f"product {e['id']} has no cloud cover value; excluded", stacklevel=2)
            continue
        try:
            cloud = float(cloud_text)
        except (TypeError, ValueError):
            raise ParseError(f"entry {e['id']}: bad cloud cover {cloud_text!r}") from None
        if not 0 <= cloud <= 100:
            raise ParseError(f"entry {e['id']}: cloud cover {cloud} outside [0, 100]")
        if cloud > cloud_max:
            continue
        footprint = _named(e, "str").get("footprint", "")
        records.append(ProductRecord(e["id"], e["title"], sensing, cloud, footprint))
    records.sort(key=lambda r: (r.sensing_date, r.id))
    return ParsedProducts(records, flagged)


def parse_products(doc, cloud_max: float = 100.0) -> list[ProductRecord]:
    """Records sorted by sensing date, keeping those with cloud cover <= ``cloud_max``."""
    return parse_products_detailed(doc, cloud_max).records


class Fetcher(Protocol):
    def fetch(self, query: str) -> str:
        """Return the raw catalogue response for ``query``."""


class FixtureFetcher:
    """Serves recorded responses: a single file, or a directory holding an
    ``index.json`` that maps query strings to file names."""

    def __init__(self, path):
        self.path = Path(path)

    def fetch(self, query: str) -> str:
        if self.path.is_file():
            return self.path.read_text()
        index = json.loads((self.path / "index.json").read_text())
        if query not in index:
            raise KeyError(f"no recorded response for query {query!r}")
        return (self.path / index[query]).read_text()


def search(q: AcquisitionQuery, fetcher: Fetcher) -> ParsedProducts:
    query = build_query(q)
    log.info("catalogue query: %s", query)
    return parse_products_detailed(fetcher.fetch(query), q.cloud_max)
