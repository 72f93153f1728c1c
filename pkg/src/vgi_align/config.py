"""Run configuration: loading, layered overrides and exhaustive validation."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .align_engine import BUILTIN_PREDICATES, PipelineConfig
from .instruct_builder import PROMPT_KINDS

LLM_STAGES = ("caption", "instruct", "bench")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class Inputs:
    features: str | None = None
    whitelist: str | None = None
    public_captions: str | None = None
    benchmark: str | None = None


@dataclass
class AlignSettings:
    predicates: list[str] = field(default_factory=lambda: ["exact-duplicate"])


@dataclass
class CaptionSettings:
    template: str = "cap_gen"
    temperature: float = 0.7
    top_p: float = 0.95
    max_tokens: int = 256


@dataclass
class InstructSettings:
    rich_k: int = 15000
    kinds: list[str] = field(default_factory=lambda: ["reasoning", "detail", "conversation"])
    kv_sep: str = ":"
    max_tokens: int = 1024
    min_tokens: int = 10
    min_sim_pct: float = 15.0
    scorer: dict = field(default_factory=lambda: {"kind": "constant", "value": 100.0})


@dataclass
class BenchSettings:
    trials: int = 4
    policy: str = "strict"


@dataclass
class EndpointSettings:
    kind: str = "mock"
    url: str | None = None
    model: str = ""
    api_key_env: str = "VGI_ALIGN_API_KEY"
    concurrency: int = 4
    retries: int = 2
    backoff_s: float = 0.5
    timeout_s: float = 120.0


@dataclass
class RunConfig:
    out_dir: str = "run"
    inputs: Inputs = field(default_factory=Inputs)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    align: AlignSettings = field(default_factory=AlignSettings)
    caption: CaptionSettings = field(default_factory=CaptionSettings)
    instruct: InstructSettings = field(default_factory=InstructSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)
    endpoint: EndpointSettings | None = field(default_factory=EndpointSettings)
    stages: dict[str, bool] = field(default_factory=lambda: {"caption": True, "instruct": True, "bench": False})
    base_dir: Path = field(default=Path("."), repr=False, compare=False)

    def path(self, value: str | None) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def to_obj(self) -> dict:
        obj = asdict(self)
        obj.pop("base_dir")
        return obj

    def section(self, name: str) -> Any:
        return self.to_obj()[name]


_SECTIONS = {
    "inputs": Inputs, "pipeline": PipelineConfig, "align": AlignSettings, "caption": CaptionSettings,
    "instruct": InstructSettings, "bench": BenchSettings, "endpoint": EndpointSettings,
}


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _build_section(name: str, raw, errors: list[str]):
    cls = _SECTIONS[name]
    if raw is None:
        return None if name == "endpoint" else cls()
    if not isinstance(raw, dict):
        errors.append(f"{name}: must be a mapping")
        return cls()
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            errors.append(f"{name}.{key}: unknown field")
    kwargs = {k: v for k, v in raw.items() if k in known}
    defaults = cls()
    for f in fields(cls):
        if f.name not in kwargs:
            continue
        default = getattr(defaults, f.name)
        value = kwargs[f.name]
        if default is not None and value is not None:
            if _is_num(default) and not _is_num(value):
                errors.append(f"{name}.{f.name}: must be a number, got {value!r}")
                kwargs[f.name] = default
            elif isinstance(default, (str, list, dict)) and not isinstance(value, type(default)):
                errors.append(f"{name}.{f.name}: must be a {type(default).__name__}, got {value!r}")
                kwargs[f.name] = default
    return cls(**kwargs)


def _validate(cfg: RunConfig, errors: list[str]) -> None:
    errors.extend(cfg.pipeline.errors(prefix="pipeline."))
    for name in cfg.align.predicates:
        if name not in BUILTIN_PREDICATES and ":" not in name:
            errors.append(f"align.predicates: unknown predicate {name!r}")
    c = cfg.caption
    if not 0 < c.temperature <= 2:
        errors.append("caption.temperature: must be in (0, 2]")
    if not 0 < c.top_p <= 1:
        errors.append("caption.top_p: must be in (0, 1]")
    if not _is_int(c.max_tokens) or c.max_tokens <= 0:
        errors.append("caption.max_tokens: must be a positive integer")
    i = cfg.instruct
    if not _is_int(i.rich_k) or i.rich_k < 0:
        errors.append("instruct.rich_k: must be an integer >= 0")
    for kind in i.kinds:
        if kind not in PROMPT_KINDS:
            errors.append(f"instruct.kinds: unknown kind {kind!r}")
    if not _is_int(i.min_tokens) or i.min_tokens < 0:
        errors.append("instruct.min_tokens: must be an integer >= 0")
    if not 0 <= i.min_sim_pct <= 100:
        errors.append("instruct.min_sim_pct: must be a percentage in [0, 100]")
    kind = i.scorer.get("kind")
    if kind == "constant":
        if not _is_num(i.scorer.get("value")):
            errors.append("instruct.scorer.value: must be a number")
    elif kind == "import":
        if ":" not in str(i.scorer.get("target", "")):
            errors.append("instruct.scorer.target: must look like 'module:function'")
    else:
        errors.append(f"instruct.scorer.kind: must be 'constant' or 'import', got {kind!r}")
    if not _is_int(cfg.bench.trials) or cfg.bench.trials < 1:
        errors.append("bench.trials: must be an integer >= 1")
    if cfg.bench.policy not in ("strict", "average"):
        errors.append("bench.policy: must be 'strict' or 'average'")
    for key, value in cfg.stages.items():
        if key not in LLM_STAGES:
            errors.append(f"stages.{key}: unknown stage toggle")
        elif not isinstance(value, bool):
            errors.append(f"stages.{key}: must be true or false")
    llm_on = any(cfg.stages.get(s) for s in LLM_STAGES)
    ep = cfg.endpoint
    if llm_on and ep is None:
        errors.append("endpoint: required when caption, instruct or bench is enabled")
    if not llm_on and ep is not None:
        errors.append("endpoint: must be omitted when no LLM stage is enabled")
    if ep is not None:
        if ep.kind not in ("mock", "http"):
            errors.append(f"endpoint.kind: must be 'mock' or 'http', got {ep.kind!r}")
        if ep.kind == "http" and not ep.url:
            errors.append("endpoint.url: required for an http endpoint")
        if not _is_int(ep.concurrency) or ep.concurrency < 1:
            errors.append("endpoint.concurrency: must be an integer >= 1")
        if not _is_int(ep.retries) or ep.retries < 0:
            errors.append("endpoint.retries: must be an integer >= 0")
        if not _is_num(ep.backoff_s) or ep.backoff_s < 0:
            errors.append("endpoint.backoff_s: must be >= 0")
    if cfg.inputs.features is None:
        errors.append("inputs.features: required")
    if cfg.stages.get("bench") and cfg.inputs.benchmark is None:
        errors.append("inputs.benchmark: required when the bench stage is enabled")
    for f in fields(Inputs):
        p = cfg.path(getattr(cfg.inputs, f.name))
        if p is not None and not p.is_file():
            errors.append(f"inputs.{f.name}: file not found: {p}")


def from_obj(raw: dict, base_dir: Path = Path(".")) -> tuple[RunConfig, list[str]]:
    errors: list[str] = []
    if not isinstance(raw, dict):
        return RunConfig(base_dir=base_dir), ["<root>: config must be a mapping"]
    known = {f.name for f in fields(RunConfig)} - {"base_dir"}
    for key in raw:
        if key not in known:
            errors.append(f"{key}: unknown field")
    stages = {"caption": True, "instruct": True, "bench": False}
    if isinstance(raw.get("stages"), dict):
        stages.update(raw["stages"])
    elif "stages" in raw:
        errors.append("stages: must be a mapping")
    sections = {name: _build_section(name, raw.get(name), errors) for name in _SECTIONS if name != "endpoint"}
    if "endpoint" in raw:
        sections["endpoint"] = _build_section("endpoint", raw["endpoint"], errors)
    else:
        llm_on = any(stages.get(s) is True for s in LLM_STAGES)
        sections["endpoint"] = EndpointSettings() if llm_on else None
    out_dir = raw.get("out_dir", "run")
    if not isinstance(out_dir, str):
        errors.append("out_dir: must be a string")
        out_dir = "run"
    cfg = RunConfig(out_dir=out_dir, stages=stages, base_dir=base_dir, **sections)
    _validate(cfg, errors)
    return cfg, errors


def set_dotted(obj: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = obj
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError([f"override {text!r}: expected key=value"])
    key, value = text.split("=", 1)
    return key.strip(), yaml.safe_load(value)


def validate(path: str | Path, overrides: list[str] = ()) -> tuple[RunConfig, list[str]]:
    """Load and check a config file; every problem is reported, not just the first."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")  # OSError propagates
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        return RunConfig(base_dir=path.parent), [f"<root>: invalid YAML ({exc})"]
    raw = copy.deepcopy(raw)
    for item in overrides:
        key, value = parse_override(item)
        set_dotted(raw, key, value)
    return from_obj(raw, base_dir=path.parent)


def load(path: str | Path, overrides: list[str] = ()) -> RunConfig:
    cfg, errors = validate(path, overrides)
    if errors:
        raise ConfigError(errors)
    return cfg


def default_config_text() -> str:
    return resources.files("vgi_align").joinpath("data/default_config.yaml").read_text(encoding="utf-8")
