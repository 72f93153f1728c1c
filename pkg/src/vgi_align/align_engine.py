"""Anchor selection, square image extents and feature association."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Iterable, Sequence

from .geo_core import GeoBBox, aspect_ratio
from .osm_ingest import FeatureRecord, FeatureStore

log = logging.getLogger(__name__)

SAMPLE_SCHEMA = "vgi-align/aligned-sample@1"
POOL_MANIFEST_SCHEMA = "vgi-align/pool-manifest@1"

RAW, RETAINED, FILTERED_OUT = "raw", "retained", "filtered-out"


@dataclass(frozen=True)
class PipelineConfig:
    resolution_m_per_px: float = 1.0
    min_anchor_px: int = 128
    max_aspect: float = 4.0
    max_image_px: int = 768
    feature_area_divisor: float = 64.0
    extent_expansion: float = 2.0
    scope_lon_deg: float = 0.3
    scope_lat_deg: float = 0.28
    balance_threshold: int = 20000
    rng_seed: int = 0

    def errors(self, prefix: str = "") -> list[str]:
        errs = []
        for f in fields(self):
            if f.name == "rng_seed":
                continue
            value = getattr(self, f.name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
                errs.append(f"{prefix}{f.name}: must be a number > 0, got {value!r}")
        if not isinstance(self.rng_seed, int) or not 0 <= self.rng_seed < 2**64:
            errs.append(f"{prefix}rng_seed: must be a 64-bit unsigned integer")
        if isinstance(self.max_aspect, (int, float)) and not self.max_aspect > 1:
            errs.append(f"{prefix}max_aspect: must be > 1")
        if (
            isinstance(self.min_anchor_px, (int, float))
            and isinstance(self.max_image_px, (int, float))
            and self.min_anchor_px > self.max_image_px
        ):
            errs.append(f"{prefix}min_anchor_px: must not exceed max_image_px")
        return errs

    def validate(self) -> "PipelineConfig":
        errs = self.errors()
        if errs:
            raise ValueError("; ".join(errs))
        return self

    @property
    def anchor_area_threshold(self) -> float:
        return (self.min_anchor_px * self.resolution_m_per_px) ** 2


@dataclass(frozen=True)
class ImageExtent:
    footprint: GeoBBox
    side_m: float
    pixel_size: int
    resolution: float
    acquisition_ref: str

    @property
    def area(self) -> float:
        return self.side_m * self.side_m


@dataclass(frozen=True)
class AssociatedFeature:
    feature_id: int
    tags: dict[str, str]
    pixel_box: tuple[float, float, float, float]


@dataclass(frozen=True)
class AlignedSample:
    extent: ImageExtent
    anchor_id: int
    associated: tuple[AssociatedFeature, ...]
    status: str = RAW
    reason: str | None = None
    city: str | None = None
    country: str | None = None

    @property
    def id(self) -> int:
        return self.anchor_id

    @property
    def is_retained(self) -> bool:
        return self.status == RETAINED

    def drop(self, reason: str) -> "AlignedSample":
        return replace(self, status=FILTERED_OUT, reason=reason)


def select_anchors(store: FeatureStore, cfg: PipelineConfig) -> list[int]:
    """Features larger than the minimum image and not too slender, ascending id."""
    threshold = cfg.anchor_area_threshold
    out = []
    for rec in store:
        if store.area(rec.id) > threshold and aspect_ratio(store.bbox(rec.id)) < cfg.max_aspect:
            out.append(rec.id)
    return out


def derive_extent(anchor: FeatureRecord, cfg: PipelineConfig) -> ImageExtent:
    box = anchor.bbox
    res = cfg.resolution_m_per_px
    side = cfg.extent_expansion * max(box.width, box.height)
    side = min(max(side, cfg.min_anchor_px * res), cfg.max_image_px * res)
    cx, cy = box.center
    footprint = GeoBBox.around(cx, cy, side)
    pixel_size = min(round(side / res), cfg.max_image_px)
    ref = f"wm:{cx:.3f},{cy:.3f}:{side:.3f}m@{res:g}"
    return ImageExtent(footprint, side, pixel_size, res, ref)


def to_pixel_box(box: GeoBBox, extent: ImageExtent) -> tuple[float, float, float, float]:
    """Map a projected box to image pixels (origin top-left, y down), clipped to the image."""
    fp = extent.footprint
    scale = extent.pixel_size / extent.side_m
    size = float(extent.pixel_size)

    def clip(v: float) -> float:
        return min(max(v, 0.0), size)

    x1 = clip((box.min_x - fp.min_x) * scale)
    x2 = clip((box.max_x - fp.min_x) * scale)
    y1 = clip((fp.max_y - box.max_y) * scale)
    y2 = clip((fp.max_y - box.min_y) * scale)
    return (x1, y1, x2, y2)


def associate_features(
    extent: ImageExtent, store: FeatureStore, cfg: PipelineConfig, anchor_id: int
) -> tuple[AssociatedFeature, ...]:
    limit = extent.area / cfg.feature_area_divisor
    out = []
    for rec in store.query_bbox(extent.footprint):
        if rec.id == anchor_id or store.area(rec.id) < limit:
            out.append(AssociatedFeature(rec.id, dict(rec.tags), to_pixel_box(store.bbox(rec.id), extent)))
    if not any(a.feature_id == anchor_id for a in out):
        # anchor bbox always meets its own extent; guard against a store mismatch
        anchor = store.get(anchor_id)
        out.append(AssociatedFeature(anchor_id, dict(anchor.tags), to_pixel_box(store.bbox(anchor_id), extent)))
        out.sort(key=lambda a: a.feature_id)
    return tuple(out)


ImagePredicate = Callable[[AlignedSample], "str | None"]


@dataclass
class FilterReport:
    dropped: Counter = field(default_factory=Counter)
    retained: int = 0


def apply_image_filters(
    samples: Iterable[AlignedSample],
    predicates: Sequence[tuple[str, ImagePredicate]] = (),
) -> tuple[list[AlignedSample], FilterReport]:
    """Run named predicates in order; the first one returning a reason drops the sample.

    A predicate returns ``None`` to keep a sample or a reason string to drop it.
    An exception inside a predicate drops the sample as ``predicate-error:<name>``.
    """
    report = FilterReport()
    out = []
    for sample in samples:
        reason = None
        for name, pred in predicates:
            try:
                reason = pred(sample)
            except Exception:
                log.exception("image predicate %r failed on sample %s", name, sample.id)
                reason = f"predicate-error:{name}"
            if reason:
                break
        if reason:
            report.dropped[reason] += 1
            out.append(sample.drop(reason))
        else:
            report.retained += 1
            out.append(replace(sample, status=RETAINED, reason=None))
    return out, report


def exact_duplicate_predicate(samples: Sequence[AlignedSample]) -> ImagePredicate:
    """Keep the first sample (lowest id) per acquisition ref; later ones are duplicates."""
    first: dict[str, int] = {}
    for s in sorted(samples, key=lambda s: s.id):
        first.setdefault(s.extent.acquisition_ref, s.id)

    def predicate(sample: AlignedSample) -> str | None:
        return None if first.get(sample.extent.acquisition_ref) == sample.id else "duplicate"

    return predicate


PredicateFactory = Callable[[Sequence[AlignedSample]], ImagePredicate]

BUILTIN_PREDICATES: dict[str, PredicateFactory] = {
    "exact-duplicate": exact_duplicate_predicate,
}


@dataclass
class PoolManifest:
    features: int = 0
    anchors: int = 0
    samples: int = 0
    retained: int = 0
    dropped: dict[str, int] = field(default_factory=dict)

    def to_obj(self) -> dict:
        return {
            "schema": POOL_MANIFEST_SCHEMA,
            "features": self.features,
            "anchors": self.anchors,
            "samples": self.samples,
            "retained": self.retained,
            "dropped": dict(sorted(self.dropped.items())),
        }


def build_raw_pool(
    store: FeatureStore,
    cfg: PipelineConfig,
    predicates: Sequence[tuple[str, PredicateFactory]] = (),
) -> tuple[list[AlignedSample], PoolManifest]:
    """select_anchors -> derive_extent -> associate_features -> apply_image_filters.

    ``predicates`` holds ``(name, factory)`` pairs; each factory sees the whole
    raw pool and returns the per-sample predicate.
    """
    manifest = PoolManifest(features=store.count)
    anchors = select_anchors(store, cfg)
    manifest.anchors = len(anchors)
    raw = []
    for aid in anchors:
        anchor = store.get(aid)
        extent = derive_extent(anchor, cfg)
        assoc = associate_features(extent, store, cfg, aid)
        raw.append(AlignedSample(extent, aid, assoc, city=anchor.city, country=anchor.country))
    manifest.samples = len(raw)
    built = [(name, factory(raw)) for name, factory in predicates]
    pool, report = apply_image_filters(raw, built)
    manifest.retained = report.retained
    manifest.dropped = dict(report.dropped)
    return pool, manifest


def validate_sample(sample: AlignedSample, store: FeatureStore, cfg: PipelineConfig) -> list[str]:
    """Re-check a sample from scratch against the anchor and association rules."""
    problems = []
    aid = sample.anchor_id
    if store.area(aid) <= cfg.anchor_area_threshold:
        problems.append("anchor area not above threshold")
    if aspect_ratio(store.bbox(aid)) >= cfg.max_aspect:
        problems.append("anchor aspect ratio too large")
    ids = [a.feature_id for a in sample.associated]
    if aid not in ids:
        problems.append("anchor missing from associated features")
    ext = sample.extent
    fp = ext.footprint
    if abs(fp.width - ext.side_m) > 1e-6 or abs(fp.height - ext.side_m) > 1e-6:
        problems.append("footprint is not square")
    if ext.pixel_size > cfg.max_image_px:
        problems.append("pixel size above cap")
    for a in sample.associated:
        if a.feature_id != aid and not store.area(a.feature_id) < ext.area / cfg.feature_area_divisor:
            problems.append(f"feature {a.feature_id} violates the area fraction rule")
        if not store.bbox(a.feature_id).intersects(fp):
            problems.append(f"feature {a.feature_id} lies outside the extent")
        if not all(0.0 <= v <= ext.pixel_size for v in a.pixel_box):
            problems.append(f"feature {a.feature_id} pixel box outside the image")
    return problems


def sample_to_obj(s: AlignedSample) -> dict:
    fp = s.extent.footprint
    return {
        "schema": SAMPLE_SCHEMA,
        "id": s.id,
        "anchor_id": s.anchor_id,
        "extent": {
            "footprint": [fp.min_x, fp.min_y, fp.max_x, fp.max_y],
            "side_m": s.extent.side_m,
            "pixel_size": s.extent.pixel_size,
            "resolution": s.extent.resolution,
            "acquisition_ref": s.extent.acquisition_ref,
        },
        "associated": [
            {"id": a.feature_id, "tags": a.tags, "pixel_box": list(a.pixel_box)}
            for a in s.associated
        ],
        "status": s.status,
        "reason": s.reason,
        "city": s.city,
        "country": s.country,
    }


def sample_from_obj(obj: dict) -> AlignedSample:
    if obj.get("schema") != SAMPLE_SCHEMA:
        raise ValueError(f"unsupported sample schema {obj.get('schema')!r}")
    e = obj["extent"]
    extent = ImageExtent(GeoBBox(*e["footprint"]), e["side_m"], e["pixel_size"], e["resolution"], e["acquisition_ref"])
    assoc = tuple(AssociatedFeature(a["id"], dict(a["tags"]), tuple(a["pixel_box"])) for a in obj["associated"])
    return AlignedSample(extent, obj["anchor_id"], assoc, obj["status"], obj["reason"], obj.get("city"), obj.get("country"))
