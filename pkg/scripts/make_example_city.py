"""Regenerate the bundled 20-line example extract (``data/example_city.jsonl``).

Features are laid out as axis-aligned rectangles in projected meters around an
origin near Zurich, then written as lon/lat rings. Two lines are deliberately
malformed so that ingest diagnostics are exercised.
"""
from __future__ import annotations

import json
import sys
from pathlib import Path

from vgi_align.geo_core import LonLat, MercatorPoint, project, unproject

ORIGIN = project(LonLat(8.54, 47.37))

# id, (x0, y0, x1, y1) offsets in meters, tags
RECTS = [
    (1, (0, 0, 200, 150), {"leisure": "park", "name": "Lindenhof"}),
    (2, (1000, 0, 1500, 500), {"landuse": "residential"}),
    (3, (3000, 0, 3600, 100), {"landuse": "industrial"}),
    (4, (20000, 0, 20100, 100), {"landuse": "farmland"}),
    (5, (5000, 0, 5130, 130), {"leisure": "stadium"}),
    (6, (30000, 0, 30200, 200), {"boundary": "administrative", "admin_level": "9"}),
    (7, (31000, 0, 31100, 100), {"barrier": "wall", "landuse": "industrial"}),
    (9, (1000, 0, 1500, 500), {"landuse": "grass"}),
    (10, (8000, 0, 8150, 150), {"name": "Lot 10", "website": "https://example.org"}),
    (11, (10000, 0, 10150, 150), {"landuse": "residential"}),
    (12, (210, 10, 230, 30), {"building": "yes"}),
    (13, (20, 160, 50, 200), {"leisure": "pitch", "sport": "soccer"}),
    (14, (-50, -50, -30, -30), {"addr:street": "Rennweg", "addr:housenumber": "4"}),
    (15, (1100, 100, 1200, 200), {"amenity": "school"}),
    (16, (1300, 300, 1390, 390), {"shop": "supermarket", "building": "retail"}),
    (17, (5140, 140, 5160, 160), {"building": "yes"}),
    (18, (10160, 10, 10180, 30), {"building": "yes"}),
    (20, (400, 0, 440, 40), {"natural": "water"}),
]


def ring(x0, y0, x1, y1):
    pts = [(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)]
    out = []
    for dx, dy in pts:
        p = unproject(MercatorPoint(ORIGIN.x + dx, ORIGIN.y + dy))
        out.append([round(p.lon, 9), round(p.lat, 9)])
    return out


def main(path: Path) -> None:
    lines = {}
    for fid, box, tags in RECTS:
        lines[fid] = {"id": fid, "geometry": {"type": "Polygon", "coordinates": [ring(*box)]},
                      "tags": tags, "city": "Zurich", "country": "Switzerland"}
    open_ring = ring(12000, 0, 12100, 100)[:-1]
    lines[8] = {"id": 8, "geometry": {"type": "Polygon", "coordinates": [open_ring]}, "tags": {"landuse": "meadow"}}
    lines[19] = {"id": 19, "geometry": {"type": "Point", "coordinates": [8.6, 47.4]}, "tags": {"amenity": "bench"}}
    text = "".join(json.dumps(lines[i], ensure_ascii=False) + "\n" for i in sorted(lines))
    path.write_text(text, encoding="utf-8")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parents[1] / "src/vgi_align/data/example_city.jsonl")
