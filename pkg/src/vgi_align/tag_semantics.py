"""OSM key filtering, whitelist pruning and semantic balancing."""
from __future__ import annotations

import hashlib
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .align_engine import AlignedSample

RULE_NAME_OR_ADDR = "name-or-addr"
RULE_NO_ALPHA = "no-alphabetic-values"
RULE_FEW_VALUES = "too-few-values"

Pair = tuple[str, str]


@dataclass(frozen=True)
class KeyStats:
    occurrences: int
    distinct_values: int
    character_free: bool


@dataclass(frozen=True)
class KeyFilterResult:
    kept: tuple[str, ...]
    rejected: dict[str, tuple[str, ...]]
    stats: dict[str, KeyStats]


def key_stats(corpus: Iterable[Pair]) -> dict[str, KeyStats]:
    occurrences: Counter = Counter()
    values: dict[str, set] = defaultdict(set)
    for key, value in corpus:
        occurrences[key] += 1
        values[key].add(value)
    return {
        k: KeyStats(
            occurrences[k],
            len(values[k]),
            not any(ch.isalpha() for v in values[k] for ch in v),
        )
        for k in sorted(occurrences)
    }


def auto_filter_keys(corpus: Iterable[Pair]) -> KeyFilterResult:
    """Reject keys naming things or addresses, keys with only character-free
    values, and keys with fewer than 3 distinct values.

    Every firing rule is recorded for a rejected key.
    """
    stats = key_stats(corpus)
    if not stats:
        raise ValueError("empty key corpus")
    kept, rejected = [], {}
    for key, st in stats.items():
        rules = []
        if "name" in key or "addr" in key:
            rules.append(RULE_NAME_OR_ADDR)
        if st.character_free:
            rules.append(RULE_NO_ALPHA)
        if st.distinct_values < 3:
            rules.append(RULE_FEW_VALUES)
        if rules:
            rejected[key] = tuple(rules)
        else:
            kept.append(key)
    return KeyFilterResult(tuple(kept), rejected, stats)


class KeyWhitelist:
    """Ordered set of keys kept after manual review."""

    def __init__(self, keys: Iterable[str]):
        self.keys = tuple(dict.fromkeys(keys))
        if not self.keys:
            raise ValueError("whitelist is empty")
        bad = [k for k in self.keys if "name" in k or "addr" in k]
        if bad:
            raise ValueError(f"whitelist contains name/addr keys: {bad}")
        self._set = frozenset(self.keys)

    def __contains__(self, key: str) -> bool:
        return key in self._set

    def __len__(self) -> int:
        return len(self.keys)

    def __iter__(self):
        return iter(self.keys)

    @classmethod
    def parse(cls, text: str) -> "KeyWhitelist":
        keys = []
        for line in text.splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                keys.append(line)
        return cls(keys)

    @classmethod
    def from_file(cls, path: str | Path) -> "KeyWhitelist":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    @classmethod
    def default(cls) -> "KeyWhitelist":
        text = resources.files("vgi_align").joinpath("data/selected_keys.txt").read_text(encoding="utf-8")
        return cls.parse(text)


def apply_whitelist(sample: AlignedSample, wl: KeyWhitelist) -> AlignedSample:
    features = []
    for a in sample.associated:
        tags = {k: v for k, v in a.tags.items() if k in wl}
        if tags:
            features.append(replace(a, tags=tags))
    if not features:
        return replace(sample, associated=(), status="filtered-out", reason="no-semantic-tags")
    return replace(sample, associated=tuple(features))


def dedup_pairs_per_image(sample: AlignedSample) -> frozenset[Pair]:
    return frozenset((k, v) for a in sample.associated for k, v in a.tags.items())


def pair_counts(images: Mapping[int, frozenset[Pair]]) -> Counter:
    counts: Counter = Counter()
    for pairs in images.values():
        counts.update(pairs)
    return counts


def image_rng(seed: int, image_id: int) -> np.random.Generator:
    """Independent generator per (seed, image id)."""
    digest = hashlib.sha256(f"{seed}:{image_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


@dataclass(frozen=True)
class BalanceDecision:
    image_id: int
    phase1: str  # "kept" | "removed"
    probability: float | None
    draw: float | None
    final: str  # "retained" | "readmitted" | "dropped"

    def to_line(self) -> str:
        p = "" if self.probability is None else f"{self.probability:.6g}"
        d = "" if self.draw is None else f"{self.draw:.6f}"
        return f"{self.image_id}\t{self.phase1}\t{p}\t{d}\t{self.final}"


@dataclass(frozen=True)
class BalanceResult:
    retained: tuple[int, ...]
    audit: tuple[BalanceDecision, ...]
    counts: Counter


def balance(images: Mapping[int, Iterable[Pair]], t: int, seed: int) -> BalanceResult:
    """Two-phase balancing over per-image deduplicated key-value pairs.

    Phase 1 removes every image whose pairs all occur in more than ``t``
    images. Phase 2 re-admits each removed image independently with
    probability ``min(1, t / count)`` of its most frequent pair.
    """
    if isinstance(t, bool) or not t > 0:
        raise ValueError(f"balance threshold must be > 0, got {t!r}")
    sets = {iid: frozenset(p) for iid, p in images.items()}
    empty = [iid for iid, p in sets.items() if not p]
    if empty:
        raise ValueError(f"images without key-value pairs cannot be balanced: {sorted(empty)[:5]}")
    counts = pair_counts(sets)
    retained, audit = [], []
    for iid in sorted(sets):
        pairs = sets[iid]
        if any(counts[p] <= t for p in pairs):
            retained.append(iid)
            audit.append(BalanceDecision(iid, "kept", None, None, "retained"))
            continue
        p = min(min(1.0, t / counts[pair]) for pair in pairs)
        draw = float(image_rng(seed, iid).random())
        if draw < p:
            retained.append(iid)
            audit.append(BalanceDecision(iid, "removed", p, draw, "readmitted"))
        else:
            audit.append(BalanceDecision(iid, "removed", p, draw, "dropped"))
    return BalanceResult(tuple(retained), tuple(audit), counts)
