"""Caption prompt assembly from pruned tags and caption record assembly."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .align_engine import AlignedSample
from .chat import BatchResult, ChatRequest

TEMPLATE_SCHEMA = "vgi-align/prompt-template@1"
CAPTION_SCHEMA = "vgi-align/caption@1"


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system: str
    shots: tuple[tuple[str, str], ...]

    @property
    def turns(self) -> tuple[tuple[str, str], ...]:
        return self.shots


def _parse_template(text: str, origin: str) -> PromptTemplate:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TemplateError(f"{origin}: not valid JSON ({exc})") from None
    if not isinstance(obj, dict) or obj.get("schema") != TEMPLATE_SCHEMA:
        raise TemplateError(f"{origin}: missing or unsupported schema tag")
    system = obj.get("system")
    shots = obj.get("shots")
    if not isinstance(system, str) or not isinstance(shots, list):
        raise TemplateError(f"{origin}: needs a 'system' string and a 'shots' list")
    pairs = []
    for i, shot in enumerate(shots):
        if not isinstance(shot, dict) or shot.get("role") not in ("user", "assistant") or not isinstance(shot.get("content"), str):
            raise TemplateError(f"{origin}: shot {i} needs a user/assistant role and string content")
        pairs.append((shot["role"], shot["content"]))
    return PromptTemplate(obj.get("name", origin), system, tuple(pairs))


def load_template(source: str | Path) -> PromptTemplate:
    """Load a template by file path, or by bundled name such as ``"cap_gen"``."""
    path = Path(source)
    if path.suffix == ".json" or path.exists():
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise TemplateError(f"cannot read template {source}: {exc}") from None
        return _parse_template(text, str(source))
    res = resources.files("vgi_align").joinpath(f"data/templates/{source}.json")
    if not res.is_file():
        raise TemplateError(f"no bundled template named {source!r}")
    return _parse_template(res.read_text(encoding="utf-8"), str(source))


def load_template_data(name: str) -> dict:
    """Raw bundled template data (template lists rather than chat shots)."""
    res = resources.files("vgi_align").joinpath(f"data/templates/{name}.json")
    return json.loads(res.read_text(encoding="utf-8"))


def serialize_tags(sample: AlignedSample) -> str:
    features = sorted((a for a in sample.associated if a.tags), key=lambda a: a.feature_id)
    if not features:
        raise ValueError(f"sample {sample.id} has no tagged features")
    lines = [
        f"There are {len(features)} tags contained in this image. Their keys and values are listed below:"
    ]
    for i, a in enumerate(features, start=1):
        lines.append(f"{i}. " + "; ".join(f"Key: {k}, Value: {v}" for k, v in a.tags.items()))
    return "\n".join(lines)


def build_caption_request(
    sample: AlignedSample,
    template: PromptTemplate | str | Path = "cap_gen",
    *,
    temperature: float = 0.7,
    top_p: float = 0.95,
    max_tokens: int = 256,
) -> ChatRequest:
    if not isinstance(template, PromptTemplate):
        template = load_template(template)
    turns = template.shots + (("user", serialize_tags(sample)),)
    return ChatRequest(template.system, turns, temperature, top_p, max_tokens)


@dataclass(frozen=True)
class CaptionRecord:
    sample_id: int
    caption: str
    resolution: float
    country: str | None
    city: str | None
    request_digest: str
    model: str
    latency_ms: float

    def __post_init__(self):
        if not self.caption.strip():
            raise ValueError("caption is empty")
        if not self.resolution > 0:
            raise ValueError("resolution must be > 0")

    def to_obj(self, include_latency: bool = False) -> dict:
        # latency stays out of dataset files so reruns are byte-identical
        trace = {"request_digest": self.request_digest, "model": self.model}
        if include_latency:
            trace["latency_ms"] = round(self.latency_ms, 3)
        return {
            "schema": CAPTION_SCHEMA,
            "sample_id": self.sample_id,
            "caption": self.caption,
            "metadata": {"resolution": self.resolution, "country": self.country, "city": self.city},
            "trace": trace,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "CaptionRecord":
        meta = obj["metadata"]
        trace = obj.get("trace", {})
        return cls(
            obj["sample_id"], obj["caption"], meta["resolution"], meta.get("country"), meta.get("city"),
            trace.get("request_digest", ""), trace.get("model", ""), trace.get("latency_ms", 0.0),
        )


def assemble_records(
    samples: Sequence[AlignedSample],
    responses: Sequence[BatchResult],
    model: str = "",
) -> tuple[list[CaptionRecord], dict[int, str]]:
    """Pair samples with responses; returns records and ``{sample_id: drop reason}``."""
    if len(samples) != len(responses):
        raise ValueError(f"{len(samples)} samples but {len(responses)} responses")
    records, dropped = [], {}
    for sample, resp in zip(samples, responses):
        if not resp.ok:
            dropped[sample.id] = "request-failed"
            continue
        text = resp.text.strip()
        if not text:
            dropped[sample.id] = "empty-caption"
            continue
        records.append(CaptionRecord(
            sample.id, text, sample.extent.resolution, sample.country, sample.city,
            resp.request_digest, model, resp.latency_ms,
        ))
    return records, dropped
