"""Feature extract parsing, source-level filtering and the indexed feature store.

Extract format: UTF-8, one JSON object per line::

    {"id": 42, "geometry": {"type": "Polygon", "coordinates": [[[lon, lat], ...], ...]},
     "tags": {"landuse": "residential"}, "city": "Wuhan", "country": "China"}
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, TextIO

from .geo_core import GeoBBox, GeometryError, Polygon, bbox_of, projected_area
from .spatial_index import STRTree

DISCARDED_KEYS = ("boundary", "barrier")


class DuplicateIdError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureRecord:
    id: int
    geometry: Polygon
    tags: dict[str, str]
    city: str | None = None
    country: str | None = None

    def __post_init__(self):
        if not self.tags:
            raise ValueError(f"feature {self.id} has no tags")

    @property
    def bbox(self) -> GeoBBox:
        return bbox_of(self.geometry)

    @property
    def area(self) -> float:
        return projected_area(self.geometry)


@dataclass(frozen=True)
class Diagnostic:
    line: int
    rule: str
    message: str

    def to_line(self) -> str:
        return f"{self.line}\t{self.rule}\t{self.message}"


class _Reject(Exception):
    def __init__(self, rule: str, message: str):
        super().__init__(message)
        self.rule = rule


def _record_from_obj(obj) -> FeatureRecord:
    if not isinstance(obj, dict):
        raise _Reject("schema", "record is not a JSON object")
    missing = [k for k in ("id", "geometry", "tags") if k not in obj]
    if missing:
        raise _Reject("schema", f"missing field(s): {', '.join(missing)}")
    fid = obj["id"]
    if isinstance(fid, bool) or not isinstance(fid, int) or not -(2**63) <= fid < 2**63:
        raise _Reject("id-type", f"id must be a 64-bit integer, got {fid!r}")
    geom = obj["geometry"]
    if not isinstance(geom, dict) or geom.get("type") != "Polygon":
        kind = geom.get("type") if isinstance(geom, dict) else type(geom).__name__
        raise _Reject("geometry-type", f"only Polygon geometry is accepted, got {kind!r}")
    rings = geom.get("coordinates")
    if not isinstance(rings, list) or not rings:
        raise _Reject("schema", "Polygon coordinates must be a non-empty list of rings")
    try:
        poly = Polygon.from_coords(rings[0], rings[1:])
    except GeometryError as exc:
        raise _Reject(exc.rule, str(exc)) from None
    except (TypeError, IndexError, ValueError) as exc:
        raise _Reject("schema", f"malformed coordinates: {exc}") from None
    tags = obj["tags"]
    if not isinstance(tags, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in tags.items()
    ):
        raise _Reject("schema", "tags must be an object of string values")
    if not tags:
        raise _Reject("empty-tags", "feature carries no tags")
    for name in ("city", "country"):
        if obj.get(name) is not None and not isinstance(obj[name], str):
            raise _Reject("schema", f"{name} must be a string")
    return FeatureRecord(fid, poly, dict(tags), obj.get("city"), obj.get("country"))


def parse_features(lines: Iterable[str]) -> Iterator[FeatureRecord | Diagnostic]:
    """Yield a record or a diagnostic for every non-blank line, in input order."""
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            yield Diagnostic(lineno, "json-syntax", str(exc))
            continue
        try:
            yield _record_from_obj(obj)
        except _Reject as exc:
            yield Diagnostic(lineno, exc.rule, str(exc))


def read_features(fh: TextIO) -> tuple[list[FeatureRecord], list[Diagnostic]]:
    records, diagnostics = [], []
    for item in parse_features(fh):
        (records if isinstance(item, FeatureRecord) else diagnostics).append(item)
    return records, diagnostics


def feature_to_obj(rec: FeatureRecord) -> dict:
    rings = [rec.geometry.exterior, *rec.geometry.holes]
    obj = {
        "id": rec.id,
        "geometry": {
            "type": "Polygon",
            "coordinates": [[[p.lon, p.lat] for p in ring] for ring in rings],
        },
        "tags": dict(rec.tags),
    }
    if rec.city is not None:
        obj["city"] = rec.city
    if rec.country is not None:
        obj["country"] = rec.country
    return obj


def serialize_feature(rec: FeatureRecord) -> str:
    return json.dumps(feature_to_obj(rec), ensure_ascii=False)


def discard_reason(rec: FeatureRecord) -> str | None:
    for key in DISCARDED_KEYS:
        if key in rec.tags:
            return f"discarded-key:{key}"
    if not isinstance(rec.geometry, Polygon):
        return "non-polygon"
    return None


def source_filter(records: Iterable[FeatureRecord]) -> Iterator[FeatureRecord]:
    """Drop features tagged with a discarded key (any value) or without polygon geometry."""
    return (r for r in records if discard_reason(r) is None)


@dataclass
class FeatureStore:
    records: dict[int, FeatureRecord]
    source_digest: str = ""
    _bboxes: dict[int, GeoBBox] = field(default_factory=dict, repr=False)
    _areas: dict[int, float] = field(default_factory=dict, repr=False)
    _index: STRTree | None = field(default=None, repr=False)

    def __post_init__(self):
        self._bboxes = {fid: r.bbox for fid, r in self.records.items()}
        self._areas = {fid: r.area for fid, r in self.records.items()}
        self._index = STRTree((fid, b.as_tuple()) for fid, b in self._bboxes.items())

    @property
    def count(self) -> int:
        return len(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[FeatureRecord]:
        return (self.records[i] for i in sorted(self.records))

    def get(self, fid: int) -> FeatureRecord:
        return self.records[fid]

    def bbox(self, fid: int) -> GeoBBox:
        return self._bboxes[fid]

    def area(self, fid: int) -> float:
        return self._areas[fid]

    def query_bbox(self, box: GeoBBox) -> list[FeatureRecord]:
        return [self.records[i] for i in sorted(self._index.query(box.as_tuple()))]

    @property
    def provenance(self) -> dict:
        return {"source_digest": self.source_digest, "record_count": self.count}


def build_store(records: Iterable[FeatureRecord], source_digest: str = "") -> FeatureStore:
    by_id: dict[int, FeatureRecord] = {}
    first_seen: dict[int, int] = {}
    for pos, rec in enumerate(records):
        if rec.id in by_id:
            raise DuplicateIdError(
                f"duplicate feature id {rec.id}: record #{first_seen[rec.id]} "
                f"and record #{pos} both use id {rec.id}"
            )
        by_id[rec.id] = rec
        first_seen[rec.id] = pos
    if not source_digest:
        h = hashlib.sha256()
        for fid in sorted(by_id):
            h.update(serialize_feature(by_id[fid]).encode())
            h.update(b"\n")
        source_digest = h.hexdigest()
    return FeatureStore(by_id, source_digest)


def query_bbox(store: FeatureStore, box: GeoBBox) -> list[FeatureRecord]:
    """Records whose projected bbox intersects ``box``, ascending id."""
    return store.query_bbox(box)
