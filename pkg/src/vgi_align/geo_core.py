"""Coordinates, spherical Web Mercator projection and projected measurements."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

from shapely.geometry import LinearRing

EARTH_RADIUS_M = 6378137.0
HALF_WORLD_M = math.pi * EARTH_RADIUS_M
# latitude at which the projected y reaches +/- pi * R
MAX_LATITUDE = math.degrees(math.atan(math.sinh(math.pi)))


class GeometryError(ValueError):
    """Base class for invalid geometry."""

    rule = "geometry"


class DomainError(GeometryError):
    rule = "coordinate-domain"


class DegenerateGeometryError(GeometryError):
    rule = "degenerate-geometry"


class RingNotClosedError(GeometryError):
    rule = "ring-not-closed"


class TooFewVerticesError(GeometryError):
    rule = "ring-too-few-vertices"


class SelfIntersectionError(GeometryError):
    rule = "ring-self-intersection"


def _wrap_lon(lon: float) -> float:
    if -180.0 <= lon <= 180.0:
        return lon
    return (lon + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class LonLat:
    lon: float
    lat: float

    def __post_init__(self):
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise DomainError(f"non-finite coordinate ({self.lon}, {self.lat})")
        if not -MAX_LATITUDE < self.lat < MAX_LATITUDE:
            raise DomainError(f"latitude {self.lat} outside the Web Mercator band")
        object.__setattr__(self, "lon", _wrap_lon(self.lon))


@dataclass(frozen=True)
class MercatorPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise DomainError(f"non-finite point ({self.x}, {self.y})")
        if abs(self.x) > HALF_WORLD_M or abs(self.y) > HALF_WORLD_M:
            raise DomainError(f"point ({self.x}, {self.y}) outside the Web Mercator square")


@dataclass(frozen=True)
class GeoBBox:
    """Axis-aligned box in projected meters."""

    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self):
        if not (self.min_x <= self.max_x and self.min_y <= self.max_y):
            raise GeometryError(f"inverted box {self.as_tuple()}")

    @classmethod
    def from_corners(cls, lo: MercatorPoint, hi: MercatorPoint) -> "GeoBBox":
        return cls(lo.x, lo.y, hi.x, hi.y)

    @classmethod
    def around(cls, cx: float, cy: float, side: float) -> "GeoBBox":
        half = side / 2.0
        return cls(cx - half, cy - half, cx + half, cy + half)

    @property
    def min(self) -> MercatorPoint:
        return MercatorPoint(self.min_x, self.min_y)

    @property
    def max(self) -> MercatorPoint:
        return MercatorPoint(self.max_x, self.max_y)

    @property
    def width(self) -> float:
        return self.max_x - self.min_x

    @property
    def height(self) -> float:
        return self.max_y - self.min_y

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.min_x + self.max_x) / 2.0, (self.min_y + self.max_y) / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.min_x, self.min_y, self.max_x, self.max_y)

    def intersects(self, other: "GeoBBox") -> bool:
        # closed boxes: shared edges count
        return not (
            other.min_x > self.max_x
            or other.max_x < self.min_x
            or other.min_y > self.max_y
            or other.max_y < self.min_y
        )

    def contains_point(self, x: float, y: float) -> bool:
        return self.min_x <= x <= self.max_x and self.min_y <= y <= self.max_y

    def transpose(self) -> "GeoBBox":
        return GeoBBox(self.min_y, self.min_x, self.max_y, self.max_x)


def project(p: LonLat) -> MercatorPoint:
    x = EARTH_RADIUS_M * math.radians(p.lon)
    # asinh(tan) == ln(tan(pi/4 + lat/2)), without cancellation near the equator
    y = EARTH_RADIUS_M * math.asinh(math.tan(math.radians(p.lat)))
    return MercatorPoint(x, y)


def unproject(p: MercatorPoint) -> LonLat:
    if abs(p.x) > HALF_WORLD_M or abs(p.y) >= HALF_WORLD_M:
        raise DomainError(f"point ({p.x}, {p.y}) outside the invertible square")
    # degrees(pi) rounds just above 180; clamp so the antimeridian does not wrap
    lon = max(-180.0, min(180.0, math.degrees(p.x / EARTH_RADIUS_M)))
    lat = math.degrees(math.atan(math.sinh(p.y / EARTH_RADIUS_M)))
    return LonLat(lon, lat)


def project_xy(lon: float, lat: float) -> tuple[float, float]:
    """Unchecked fast path used on already-validated vertices."""
    return (
        EARTH_RADIUS_M * math.radians(lon),
        EARTH_RADIUS_M * math.asinh(math.tan(math.radians(lat))),
    )


def _ring_area_signed(xy: Sequence[tuple[float, float]]) -> float:
    # shoelace on a closed ring, shifted to the first vertex for conditioning
    x0, y0 = xy[0]
    acc = 0.0
    for (xa, ya), (xb, yb) in zip(xy, xy[1:]):
        acc += (xa - x0) * (yb - y0) - (xb - x0) * (ya - y0)
    return acc / 2.0


def _normalize_ring(coords: Iterable[Sequence[float] | LonLat]) -> tuple[LonLat, ...]:
    ring = tuple(c if isinstance(c, LonLat) else LonLat(float(c[0]), float(c[1])) for c in coords)
    if len(ring) < 2 or ring[0] != ring[-1]:
        raise RingNotClosedError("ring is not closed: first and last vertex differ")
    if len(set(ring[:-1])) < 3:
        raise TooFewVerticesError("ring needs at least 3 distinct vertices")
    return ring


def _is_degenerate(xy: Sequence[tuple[float, float]]) -> bool:
    """True when every vertex lies on one line (up to projection round-off)."""
    x0, y0 = xy[0]
    far = max(xy, key=lambda p: (p[0] - x0) ** 2 + (p[1] - y0) ** 2)
    dx, dy = far[0] - x0, far[1] - y0
    length = math.hypot(dx, dy)
    if length == 0.0:
        return True
    offset = max(abs(dx * (y - y0) - dy * (x - x0)) / length for x, y in xy)
    return offset <= 1e-9 * length


@dataclass(frozen=True)
class Polygon:
    exterior: tuple[LonLat, ...]
    holes: tuple[tuple[LonLat, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "exterior", _normalize_ring(self.exterior))
        object.__setattr__(self, "holes", tuple(_normalize_ring(h) for h in self.holes))
        for ring in (self.projected_exterior, *self.projected_holes):
            if _is_degenerate(ring):
                raise DegenerateGeometryError("ring has zero projected area")
            if not LinearRing(ring).is_simple:
                raise SelfIntersectionError("ring intersects itself")
        if projected_area(self) <= 0.0:
            raise DegenerateGeometryError("holes cover the whole exterior")

    @classmethod
    def from_coords(cls, exterior, holes=()) -> "Polygon":
        return cls(tuple(exterior), tuple(tuple(h) for h in holes))

    @classmethod
    def from_projected(cls, exterior_xy, holes_xy=()) -> "Polygon":
        """Build from projected-meter rings (each ring closed)."""
        def ring(xy):
            return tuple(unproject(MercatorPoint(x, y)) for x, y in xy)
        return cls(ring(exterior_xy), tuple(ring(h) for h in holes_xy))

    @cached_property
    def projected_exterior(self) -> tuple[tuple[float, float], ...]:
        return tuple(project_xy(p.lon, p.lat) for p in self.exterior)

    @cached_property
    def projected_holes(self) -> tuple[tuple[tuple[float, float], ...], ...]:
        return tuple(tuple(project_xy(p.lon, p.lat) for p in h) for h in self.holes)


def projected_area(poly: Polygon) -> float:
    """Shoelace area in square meters: exterior minus holes, orientation-insensitive."""
    area = abs(_ring_area_signed(poly.projected_exterior))
    for hole in poly.projected_holes:
        area -= abs(_ring_area_signed(hole))
    return area


def bbox_of(poly: Polygon) -> GeoBBox:
    xs = [x for x, _ in poly.projected_exterior]
    ys = [y for _, y in poly.projected_exterior]
    return GeoBBox(min(xs), min(ys), max(xs), max(ys))


def aspect_ratio(b: GeoBBox) -> float:
    w, h = b.width, b.height
    if w <= 0.0 or h <= 0.0:
        raise DegenerateGeometryError(f"box with zero extent ({w} x {h} m)")
    return max(w, h) / min(w, h)
