"""Static R-tree bulk loaded with Sort-Tile-Recursive packing."""
from __future__ import annotations

import math
from typing import Iterable, Sequence

Box = tuple[float, float, float, float]


def _union(boxes: Sequence[Box]) -> Box:
    return (
        min(b[0] for b in boxes),
        min(b[1] for b in boxes),
        max(b[2] for b in boxes),
        max(b[3] for b in boxes),
    )


def _overlaps(a: Box, b: Box) -> bool:
    return not (b[0] > a[2] or b[2] < a[0] or b[1] > a[3] or b[3] < a[1])


class _Node:
    __slots__ = ("box", "children", "leaf")

    def __init__(self, box: Box, children: list, leaf: bool):
        self.box = box
        self.children = children  # (box, item) pairs for leaves, _Node otherwise
        self.leaf = leaf


class STRTree:
    """Read-only R-tree over ``(item, box)`` entries.

    Boxes are ``(min_x, min_y, max_x, max_y)`` and treated as closed, so
    boxes sharing only an edge or a corner intersect.
    """

    def __init__(self, entries: Iterable[tuple[object, Box]], node_capacity: int = 16):
        if node_capacity < 2:
            raise ValueError("node_capacity must be >= 2")
        self.node_capacity = node_capacity
        items = [(tuple(map(float, box)), item) for item, box in entries]
        self._size = len(items)
        self._root = self._build(items) if items else None

    def __len__(self) -> int:
        return self._size

    def _pack(self, entries: list, key_box) -> list[list]:
        cap = self.node_capacity
        n_groups = math.ceil(len(entries) / cap)
        n_slices = math.ceil(math.sqrt(n_groups))
        per_slice = n_slices * cap

        def cx(e):
            b = key_box(e)
            return (b[0] + b[2]) / 2.0

        def cy(e):
            b = key_box(e)
            return (b[1] + b[3]) / 2.0

        groups = []
        by_x = sorted(entries, key=cx)
        for s in range(0, len(by_x), per_slice):
            run = sorted(by_x[s:s + per_slice], key=cy)
            for g in range(0, len(run), cap):
                groups.append(run[g:g + cap])
        return groups

    def _build(self, items: list) -> _Node:
        level = [
            _Node(_union([b for b, _ in g]), g, leaf=True)
            for g in self._pack(items, key_box=lambda e: e[0])
        ]
        while len(level) > 1:
            level = [
                _Node(_union([n.box for n in g]), g, leaf=False)
                for g in self._pack(level, key_box=lambda n: n.box)
            ]
        return level[0]

    def query(self, box: Box) -> list:
        """Items whose box intersects ``box`` (unordered)."""
        if self._root is None:
            return []
        box = tuple(map(float, box))
        out = []
        stack = [self._root]
        while stack:
            node = stack.pop()
            if not _overlaps(node.box, box):
                continue
            if node.leaf:
                out.extend(item for b, item in node.children if _overlaps(b, box))
            else:
                stack.extend(node.children)
        return out
