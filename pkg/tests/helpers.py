"""Shared fixtures and independent oracles for the test suite."""
from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from vgi_align.geo_core import MercatorPoint, Polygon, project_xy, unproject
from vgi_align.osm_ingest import FeatureRecord

R = 6378137.0


# ---------------------------------------------------------------- coordinate tuning

def _x_of(lon: float) -> float:
    return project_xy(lon, 0.0)[0]


def _y_of(lat: float) -> float:
    return project_xy(0.0, lat)[1]


def _solve(f, target: float, guess: float, steps: int = 400) -> float | None:
    """Float input near ``guess`` with ``f(input) == target`` exactly, or None."""
    # refine the guess by bisection first, then walk ulp by ulp around it
    lo, hi = guess - 1e-6, guess + 1e-6
    for _ in range(200):
        mid = (lo + hi) / 2
        if mid in (lo, hi):
            break
        if f(mid) < target:
            lo = mid
        else:
            hi = mid
    for start in (lo, hi):
        up = down = start
        for _ in range(steps):
            if f(up) == target:
                return up
            if f(down) == target:
                return down
            up = math.nextafter(up, math.inf)
            down = math.nextafter(down, -math.inf)
    return None


def exact_rect_lonlat(x0: float, y0: float, w: float, h: float):
    """Lon/lat corners whose projected rectangle has width ``w`` and height ``h`` exactly.

    ``x0``/``y0`` are approximate; the realised origin shifts by a few ulps
    until both opposite edges are representable exactly. Width and height
    should be small relative to the origin so the subtraction is exact.
    """
    lon0 = math.degrees(x0 / R)
    lat0 = math.degrees(math.atan(math.sinh(y0 / R)))
    for _ in range(200):
        X0 = _x_of(lon0)
        lon1 = _solve(_x_of, X0 + w, lon0 + math.degrees(w / R))
        if lon1 is not None and _x_of(lon1) - X0 == w:
            break
        lon0 = math.nextafter(lon0, math.inf)
    else:
        raise RuntimeError("could not tune longitude")
    for _ in range(200):
        Y0 = _y_of(lat0)
        guess = math.degrees(math.atan(math.sinh((Y0 + h) / R)))
        lat1 = _solve(_y_of, Y0 + h, guess)
        if lat1 is not None and _y_of(lat1) - Y0 == h:
            break
        lat0 = math.nextafter(lat0, math.inf)
    else:
        raise RuntimeError("could not tune latitude")
    return lon0, lat0, lon1, lat1


def rect_ring(lon0, lat0, lon1, lat1):
    return [(lon0, lat0), (lon1, lat0), (lon1, lat1), (lon0, lat1), (lon0, lat0)]


def exact_rect_feature(fid: int, x0: float, y0: float, w: float, h: float, tags=None) -> FeatureRecord:
    poly = Polygon.from_coords(rect_ring(*exact_rect_lonlat(x0, y0, w, h)))
    return FeatureRecord(fid, poly, dict(tags or {"landuse": "test"}))


def projected_polygon(xy, holes=()) -> Polygon:
    def ring(pts):
        pts = list(pts)
        if pts[0] != pts[-1]:
            pts.append(pts[0])
        return [unproject(MercatorPoint(x, y)) for x, y in pts]
    return Polygon.from_coords(ring(xy), [ring(h) for h in holes])


def rect_feature(fid: int, x0: float, y0: float, x1: float, y1: float, tags=None, **kw) -> FeatureRecord:
    poly = projected_polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
    return FeatureRecord(fid, poly, dict(tags or {"landuse": "test"}), **kw)


def star_polygon(rng: np.random.Generator, cx: float, cy: float, r_max: float, n: int | None = None):
    """Random star-shaped (hence simple) polygon around (cx, cy) in projected meters."""
    n = n or int(rng.integers(3, 12))
    # keep angular gaps below pi so the centre stays inside
    angles = np.linspace(0, 2 * math.pi, n, endpoint=False) + rng.uniform(0, 0.9 * 2 * math.pi / n, n)
    radii = rng.uniform(0.2, 1.0, n) * r_max
    return [(cx + r * math.cos(a), cy + r * math.sin(a)) for a, r in zip(angles, radii)]


# ---------------------------------------------------------------- oracles

def exact_ring_area(xy) -> Fraction:
    pts = [(Fraction(x), Fraction(y)) for x, y in xy]
    if pts[0] != pts[-1]:
        pts.append(pts[0])
    s = sum(xa * yb - xb * ya for (xa, ya), (xb, yb) in zip(pts, pts[1:]))
    return abs(s) / 2


def exact_area(poly: Polygon) -> Fraction:
    return exact_ring_area(poly.projected_exterior) - sum(
        (exact_ring_area(h) for h in poly.projected_holes), Fraction(0)
    )


def scanline_area(xy) -> float:
    """Integrate the cross-section width slab by slab.

    Between consecutive vertex ordinates the width is linear in y, so the
    width at the slab midpoint times the slab height is exact for polygons.
    """
    pts = list(xy)
    if pts[0] != pts[-1]:
        pts.append(pts[0])
    levels = sorted({y for _, y in pts})
    total = 0.0
    for ya, yb in zip(levels, levels[1:]):
        ym = (ya + yb) / 2
        xs = []
        for (x1, y1), (x2, y2) in zip(pts, pts[1:]):
            if (y1 <= ym) != (y2 <= ym):
                xs.append(x1 + (ym - y1) * (x2 - x1) / (y2 - y1))
        xs.sort()
        width = sum(xs[i + 1] - xs[i] for i in range(0, len(xs) - 1, 2))
        total += width * (yb - ya)
    return total


def bbox_xy(poly: Polygon):
    xs = [x for x, _ in poly.projected_exterior]
    ys = [y for _, y in poly.projected_exterior]
    return min(xs), min(ys), max(xs), max(ys)


def boxes_meet(a, b) -> bool:
    return a[0] <= b[2] and b[0] <= a[2] and a[1] <= b[3] and b[1] <= a[3]


# ---------------------------------------------------------------- benchmark fixtures

TABLE1_COUNTS = {
    "identity": 634, "color": 113, "orientation": 39, "shape": 37, "area": 75, "resolution": 21,
    "modality": 23, "location": 204, "distance": 22, "quantity": 137, "reasoning": 46,
}


def table1_benchmark_lines(n_questions: int = 690) -> list[str]:
    """Synthetic questions whose dimension tags reproduce the published per-dimension totals.

    Tags are dealt round-robin so each question carries one or two distinct
    dimensions and none is left untagged.
    """
    import json

    tags: list[list[str]] = [[] for _ in range(n_questions)]
    slot = 0
    for dim, count in TABLE1_COUNTS.items():
        for _ in range(count):
            tags[slot % n_questions].append(dim)
            slot += 1
    return [
        json.dumps({"id": f"t{i:03d}", "image": f"img/{i % 108:03d}.png", "question": f"Question {i}?",
                    "choices": ["yes", "no"], "answer": 0, "dimensions": t})
        for i, t in enumerate(tags)
    ]


BENCH10 = [
    # id, question, choices, answer, dimensions
    ("q0", "Q0 which?", ["right", "wrong"], 0, ["identity"]),
    ("q2", "Q2 colour of the roof?", ["red", "blue", "green"], 1, ["identity", "color"]),
    ("q3", "Q3 colour of the field?", ["brown", "green"], 1, ["color"]),
    ("q4", "Q4 shape of the lake?", ["round", "square", "triangular", "irregular"], 0, ["shape", "area"]),
    ("q5", "Q5 what is in the centre?", ["tennis court", "basketball stadium", "swimming pool"], 1, ["location"]),
    ("q6", "Q6 where is the harbour?", ["top left", "bottom right", "centre"], 2, ["distance", "location"]),
    ("q7", "Q7 how many tanks?", ["2", "3", "4"], 1, ["quantity"]),
    ("q8", "Q8 why is the field irrigated?", ["dry climate", "flooding"], 0, ["reasoning"]),
    ("q9", "Q9 how many fields, and why?", ["one", "three", "five", "none"], 2, ["quantity", "reasoning", "identity"]),
    ("q10", "Q10 which facility?", ["park", "park and ride"], 1, ["modality"]),
]

# question id -> correct-choice position in trials 0..3 under seed 0 (traced by hand from the permutations)
Q0_SEED0_POSITIONS = [0, 0, 1, 0]

BENCH10_EXPECTED = {
    # dimension: (correct, total)
    "identity": (2, 3), "color": (1, 2), "orientation": (0, 0), "shape": (0, 1), "area": (0, 1),
    "resolution": (0, 0), "modality": (1, 1), "location": (2, 2), "distance": (1, 1),
    "quantity": (1, 2), "reasoning": (1, 2), "overall": (5, 10),
}


def bench10_lines() -> list[str]:
    import json

    return [json.dumps({"id": i, "image": f"img/{i}.png", "question": q, "choices": c, "answer": a, "dimensions": d})
            for i, q, c, a, d in BENCH10]


class ScriptedBenchModel:
    """Answers each fixture question with a fixed behaviour, independent of thread timing."""

    model = "scripted"

    def __init__(self):
        import threading

        self.calls: dict[str, int] = {}
        self._lock = threading.Lock()

    def complete(self, request) -> str:
        prompt = request.user_message
        question = prompt.split("Question: ", 1)[1].split("\n", 1)[0]
        qid = question.split(" ", 1)[0].lower()
        with self._lock:
            n = self.calls[qid] = self.calls.get(qid, 0) + 1
        choices = dict(line.split(". ", 1) for line in prompt.split("Choice: ", 1)[1].split("\nAnswer:")[0].split("\n"))
        if qid == "q0":
            return "A"
        if qid == "q2":
            return "It is blue."
        if qid == "q3":
            return "brown"
        if qid == "q4":
            return "round" if n < 4 else "square"  # wrong on the last trial only
        if qid == "q5":
            return "The answer is a basketball stadium."
        if qid == "q6":
            letter = next(k for k, v in choices.items() if v == "centre")
            return f"{letter}. centre of the image"
        if qid == "q7":
            return "   "
        if qid == "q8":
            if n == 3:
                raise ConnectionError("endpoint unavailable")
            return "dry climate"
        if qid == "q9":
            return "five"
        if qid == "q10":
            return "park and ride"
        raise KeyError(qid)
