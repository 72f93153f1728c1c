"""Instruction-data builders: public caption filtering, grounded prompts,
multi-task templating and seeded dataset mixing."""
from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .align_engine import AlignedSample
from .caption_gen import PromptTemplate, load_template, load_template_data
from .chat import ChatRequest

log = logging.getLogger(__name__)

INSTRUCTION_SCHEMA = "vgi-align/instruction@1"
TASK_TAGS = ("[CLS]", "[VQA]", "[VG]")
PROMPT_KINDS = {
    "reasoning": "sft_osm_reasoning",
    "detail": "sft_osm_detailed",
    "conversation": "sft_osm_conv",
}

# multi-task instruction sources and their sample counts (42,322 in total)
STAGE2_MULTITASK_COUNTS = {
    "RSVQA-HR": 10000,
    "RSVQA-LR": 500,
    "UCM": 2519,
    "RSVG": 2428,
    "DIOR-RSVG": 14030,
    "NWPU": 4941,
    "METER-ML": 1400,
    "RSITMD": 504,
    "fMoW": 5000,
    "RSICD": 1000,
}
STAGE3_LLAVA_COUNT = 20000
STAGE3_MULTITASK_RATIO = 0.25


# ---------------------------------------------------------------- public captions

@dataclass(frozen=True)
class PublicCaptionEntry:
    image_id: str
    captions: tuple[str, ...]
    digest: str
    similarity: float | None = None
    kept_captions: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "captions", tuple(self.captions))
        if len(self.captions) != 5:
            raise ValueError(f"entry {self.image_id} has {len(self.captions)} captions, expected 5")

    @classmethod
    def from_obj(cls, obj: dict) -> "PublicCaptionEntry":
        return cls(str(obj["image_id"]), tuple(obj["captions"]), str(obj["digest"]))

    def to_obj(self) -> dict:
        obj = {"image_id": self.image_id, "captions": list(self.captions), "digest": self.digest}
        if self.similarity is not None:
            obj["similarity"] = self.similarity
        if self.kept_captions is not None:
            obj["kept_captions"] = list(self.kept_captions)
        return obj


Scorer = Callable[[PublicCaptionEntry], float]


def token_count(text: str) -> int:
    return len(text.split())


def filter_public_captions(
    entries: Iterable[PublicCaptionEntry],
    scorer: Scorer,
    min_tokens: int = 10,
    min_sim_pct: float = 15.0,
) -> tuple[list[PublicCaptionEntry], dict[str, str]]:
    """Deduplicate by image digest, drop short captions, drop low-similarity entries.

    Returns kept entries (with ``kept_captions`` and ``similarity`` set) and
    ``{image_id: reason}`` with exactly one reason per rejected entry. The scorer
    sees the entry with its surviving captions and returns a mean similarity
    in percent.
    """
    seen: set[str] = set()
    kept, rejected = [], {}
    for entry in entries:
        if entry.digest in seen:
            rejected[entry.image_id] = "duplicate"
            continue
        seen.add(entry.digest)
        survivors = tuple(c for c in entry.captions if token_count(c) >= min_tokens)
        if not survivors:
            rejected[entry.image_id] = "all-captions-short"
            continue
        entry = replace(entry, kept_captions=survivors)
        try:
            score = float(scorer(entry))
        except Exception:
            log.exception("similarity scorer failed on %s", entry.image_id)
            rejected[entry.image_id] = "scorer-error"
            continue
        if score < min_sim_pct:
            rejected[entry.image_id] = "low-similarity"
            continue
        kept.append(replace(entry, similarity=score))
    return kept, rejected


def build_public_prompt(entry: PublicCaptionEntry, template: PromptTemplate | str = "sft_pub_gen") -> ChatRequest:
    if not isinstance(template, PromptTemplate):
        template = load_template(template)
    captions = entry.kept_captions if entry.kept_captions is not None else entry.captions
    return ChatRequest(template.system, template.shots + (("user", "\n".join(captions)),))


# ---------------------------------------------------------------- boxes

@dataclass(frozen=True)
class UnitBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 <= self.x2 <= 1.0 and 0.0 <= self.y1 <= self.y2 <= 1.0):
            raise ValueError(f"not a unit box: {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def __str__(self) -> str:
        return "[" + ", ".join(repr(v) for v in self.as_tuple()) + "]"


def _round3(v: float) -> float:
    return float(Decimal(repr(v)).quantize(Decimal("0.001"), rounding=ROUND_HALF_UP))


def normalize_box(px: Sequence[float], width: float, height: float) -> UnitBox:
    """Pixel box (x1, y1, x2, y2) -> unit box rounded half-up to 3 decimals."""
    x1, y1, x2, y2 = (float(v) for v in px)
    if width <= 0 or height <= 0:
        raise ValueError("image size must be positive")
    if not (0 <= x1 <= x2 <= width and 0 <= y1 <= y2 <= height):
        raise ValueError(f"pixel box {tuple(px)} is inverted or outside {width}x{height}")
    return UnitBox(_round3(x1 / width), _round3(y1 / height), _round3(x2 / width), _round3(y2 / height))


def denormalize_box(box: UnitBox, width: float, height: float) -> tuple[float, float, float, float]:
    return (box.x1 * width, box.y1 * height, box.x2 * width, box.y2 * height)


# ---------------------------------------------------------------- grounded prompts

def select_rich_samples(dataset: Sequence[AlignedSample], k: int = 15000) -> list[AlignedSample]:
    """Top-k by (distinct key-value pairs, distinct keys) descending, then id ascending."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if k > len(dataset):
        log.warning("requested %d rich samples but only %d are available", k, len(dataset))

    def rank(s: AlignedSample):
        pairs = {(key, v) for a in s.associated for key, v in a.tags.items()}
        keys = {key for key, _ in pairs}
        return (-len(pairs), -len(keys), s.id)

    return sorted(dataset, key=rank)[:k]


def tag_string(tags: Mapping[str, str], kv_sep: str = ":") -> str:
    return ",".join(f"{k}{kv_sep}{v}" for k, v in tags.items())


def grounded_payload(caption: str, sample: AlignedSample, kv_sep: str = ":") -> str:
    lines = [caption.strip()]
    size = sample.extent.pixel_size
    for a in sorted(sample.associated, key=lambda a: a.feature_id):
        if a.tags:
            box = normalize_box(a.pixel_box, size, size)
            lines.append(f"{tag_string(a.tags, kv_sep)} -> {box}")
    return "\n".join(lines)


def build_instruct_prompt(
    caption: str,
    sample: AlignedSample,
    kind: str,
    *,
    kv_sep: str = ":",
    templates: Mapping[str, PromptTemplate] | None = None,
    max_tokens: int = 1024,
) -> ChatRequest:
    if kind not in PROMPT_KINDS:
        raise ValueError(f"unknown prompt kind {kind!r}; expected one of {sorted(PROMPT_KINDS)}")
    template = (templates or {}).get(kind) or load_template(PROMPT_KINDS[kind])
    user = grounded_payload(caption, sample, kv_sep)
    return ChatRequest(template.system, template.shots + (("user", user),), max_tokens=max_tokens)


# ---------------------------------------------------------------- instruction samples

@dataclass(frozen=True)
class InstructionSample:
    turns: tuple[tuple[str, str], ...]
    source: str
    task: str | None = None
    boxes: tuple[UnitBox, ...] = ()
    image: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple((q, a) for q, a in self.turns))
        if not self.turns:
            raise ValueError("instruction sample has no turns")
        if self.task is not None and self.task not in TASK_TAGS:
            raise ValueError(f"unknown task tag {self.task!r}")
        if self.task == "[VG]" and not self.boxes:
            raise ValueError("[VG] samples need at least one box")

    def to_obj(self) -> dict:
        conv = []
        for q, a in self.turns:
            conv.append({"role": "user", "content": q})
            conv.append({"role": "assistant", "content": a})
        return {
            "schema": INSTRUCTION_SCHEMA,
            "source": self.source,
            "task": self.task,
            "image": self.image,
            "conversation": conv,
            "boxes": [list(b.as_tuple()) for b in self.boxes],
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "InstructionSample":
        conv = obj["conversation"]
        turns = tuple((conv[i]["content"], conv[i + 1]["content"]) for i in range(0, len(conv), 2))
        return cls(turns, obj["source"], obj.get("task"), tuple(UnitBox(*b) for b in obj.get("boxes", [])), obj.get("image"))


_QA_RE = re.compile(r"^\s*Questions?:\s*\n?(.*?)\n\s*Answer:\s*\n?(.*?)(?=\n\s*Questions?:|\Z)", re.S | re.M)


def parse_conversation(text: str) -> tuple[tuple[str, str], ...]:
    """Split a ``Question: ... Answer: ...`` transcript into (question, answer) turns."""
    turns = []
    for q, a in _QA_RE.findall(text):
        q, a = q.strip(), a.strip()
        if q and a:
            turns.append((q, a))
    return tuple(turns)


# ---------------------------------------------------------------- multi-task templates

@dataclass(frozen=True)
class ClassificationRecord:
    image: str
    label: str
    classes: tuple[str, ...]


@dataclass(frozen=True)
class VQARecord:
    image: str
    question: str
    answer: str


@dataclass(frozen=True)
class GroundingRecord:
    image: str
    phrase: str
    box: UnitBox


_TASK_RECORD = {"[CLS]": ClassificationRecord, "[VQA]": VQARecord, "[VG]": GroundingRecord}


def apply_task_template(record, task: str, rng: np.random.Generator, source: str = "") -> InstructionSample:
    expected = _TASK_RECORD.get(task)
    if expected is None:
        raise ValueError(f"unknown task {task!r}")
    if not isinstance(record, expected):
        raise ValueError(f"{task} needs a {expected.__name__}, got {type(record).__name__}")
    templates = load_template_data("multi_task")
    if task == "[CLS]":
        options = templates["classification"]
        question = options[int(rng.integers(len(options)))].format(", ".join(record.classes))
        return InstructionSample(((f"{task} {question}", record.label),), source, task, image=record.image)
    if task == "[VG]":
        options = templates["visual_grounding"]
        question = options[int(rng.integers(len(options)))].format(record.phrase)
        return InstructionSample(((f"{task} {question}", str(record.box)),), source, task, (record.box,), record.image)
    return InstructionSample(((f"{task} {record.question}", record.answer),), source, task, image=record.image)


# ---------------------------------------------------------------- mixing

@dataclass(frozen=True)
class MixSource:
    name: str
    items: Sequence
    weight: float = 1.0


@dataclass
class MixResult:
    items: list
    origins: list[str]
    quotas: dict[str, int]
    realized: dict[str, int] = field(default_factory=dict)


def _allocate(weights: Mapping[str, Fraction], sizes: Mapping[str, int], total: int) -> dict[str, int]:
    """Largest-remainder allocation of ``total`` proportional to weights, capped by sizes."""
    quotas = {n: 0 for n in weights}
    remaining = total
    open_ = [n for n in weights if weights[n] > 0 and sizes[n] > 0]
    while remaining > 0 and open_:
        wsum = sum(weights[n] for n in open_)
        shares = {n: Fraction(remaining) * weights[n] / wsum for n in open_}
        base = {n: int(shares[n]) for n in open_}
        leftover = remaining - sum(base.values())
        for n in sorted(open_, key=lambda n: (-(shares[n] - base[n]), n))[:leftover]:
            base[n] += 1
        capped = False
        for n in open_:
            room = sizes[n] - quotas[n]
            take = min(base[n], room)
            quotas[n] += take
            remaining -= take
            capped |= take < base[n]
        open_ = [n for n in open_ if quotas[n] < sizes[n]]
        if not capped:
            break
    return quotas


def mix_datasets(sources: Sequence[MixSource], total: int, seed: int) -> MixResult:
    """Seeded weighted mix: allocate quotas, sample without replacement, interleave."""
    names = [s.name for s in sources]
    if len(set(names)) != len(names):
        raise ValueError("source names must be unique")
    if any(s.weight < 0 for s in sources) or not any(s.weight > 0 for s in sources):
        raise ValueError("weights must be >= 0 with at least one > 0")
    sizes = {s.name: len(s.items) for s in sources}
    available = sum(sizes[s.name] for s in sources if s.weight > 0)
    if total > available:
        log.warning("requested %d items but weighted sources hold %d; taking all", total, available)
        total = available
    weights = {s.name: Fraction(s.weight).limit_denominator(10**9) for s in sources}
    quotas = _allocate(weights, sizes, total)
    rng = np.random.default_rng(seed)
    picked, origins = [], []
    for s in sources:
        q = quotas[s.name]
        if q:
            idx = rng.choice(len(s.items), size=q, replace=False)
            picked.extend(s.items[int(i)] for i in idx)
            origins.extend([s.name] * q)
    order = rng.permutation(len(picked))
    items = [picked[int(i)] for i in order]
    origins = [origins[int(i)] for i in order]
    realized = {n: origins.count(n) for n in names}
    return MixResult(items, origins, quotas, realized)


def stage2_sources(datasets: Mapping[str, Sequence], extra: Mapping[str, Sequence] = ()) -> tuple[list[MixSource], int]:
    """Multi-task sources weighted so quotas equal the published per-dataset counts."""
    sources = [MixSource(n, datasets.get(n, ()), c) for n, c in STAGE2_MULTITASK_COUNTS.items()]
    total = sum(STAGE2_MULTITASK_COUNTS.values())
    for name, items in dict(extra).items():
        sources.append(MixSource(name, items, len(items)))
        total += len(items)
    return sources, total


def stage3_sources(
    instruct: Mapping[str, Sequence],
    llava: Sequence,
    multitask: Mapping[str, Sequence],
    *,
    llava_count: int = STAGE3_LLAVA_COUNT,
    multitask_ratio: float = STAGE3_MULTITASK_RATIO,
) -> tuple[list[MixSource], int]:
    """All instruct data, a fixed LLaVA draw, and multi-task data at a reduced ratio."""
    sources, total = [], 0
    for name, items in instruct.items():
        sources.append(MixSource(name, items, len(items)))
        total += len(items)
    n_llava = min(llava_count, len(llava))
    sources.append(MixSource("llava-complex-reasoning", llava, n_llava))
    total += n_llava
    for name, items in multitask.items():
        n = int(Fraction(multitask_ratio).limit_denominator(10**6) * len(items))
        sources.append(MixSource(name, items, n))
        total += n
    return sources, total


def dump_instructions(samples: Iterable[InstructionSample]) -> str:
    return "".join(json.dumps(s.to_obj(), ensure_ascii=False) + "\n" for s in samples)
