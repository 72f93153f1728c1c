"""Manifest-driven, resumable stage runner."""
from __future__ import annotations

import hashlib
import importlib
import json
import logging
import os
import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import report
from .align_engine import BUILTIN_PREDICATES, AlignedSample, build_raw_pool, sample_from_obj, sample_to_obj
from .bench_harness import evaluate, load_benchmark
from .caption_gen import CaptionRecord, assemble_records, build_caption_request, load_template
from .chat import BatchPolicy, HttpChatClient, MockChatClient, offline_responder, submit_batch
from .config import RunConfig
from .instruct_builder import (
    InstructionSample,
    PublicCaptionEntry,
    build_instruct_prompt,
    build_public_prompt,
    filter_public_captions,
    normalize_box,
    parse_conversation,
    select_rich_samples,
)
from .osm_ingest import Diagnostic, build_store, discard_reason, parse_features, serialize_feature
from .tag_semantics import KeyWhitelist, apply_whitelist, auto_filter_keys, balance, dedup_pairs_per_image

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "vgi-align/stage-manifest@1"
STAGES = ("ingest", "align", "prune", "balance", "caption", "instruct", "bench")
SKIPPED = "skipped: up-to-date"


class StageError(RuntimeError):
    pass


class OrderingError(RuntimeError):
    pass


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _jsonl(objs) -> str:
    return "".join(json.dumps(o, ensure_ascii=False) + "\n" for o in objs)


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


@dataclass(frozen=True)
class StageSpec:
    requires: tuple[str, ...]
    upstream_files: tuple[str, ...]
    external_inputs: tuple[str, ...]
    config_sections: tuple[str, ...]
    outputs: tuple[str, ...]


SPECS: dict[str, StageSpec] = {
    "ingest": StageSpec((), (), ("features",), (), ("features.jsonl", "diagnostics.tsv")),
    "align": StageSpec(("ingest",), ("features.jsonl",), (), ("pipeline", "align"), ("raw_pool.jsonl", "pool_manifest.json")),
    "prune": StageSpec(("align",), ("raw_pool.jsonl",), ("whitelist",), (), ("pruned.jsonl", "key_filter.tsv")),
    "balance": StageSpec(("prune",), ("pruned.jsonl",), (), ("pipeline",), ("balanced.jsonl", "balance_audit.tsv", "pair_counts.tsv")),
    "caption": StageSpec(("balance",), ("balanced.jsonl",), (), ("caption", "endpoint"), ("captions.jsonl", "caption_failures.tsv")),
    "instruct": StageSpec(("caption",), ("balanced.jsonl", "captions.jsonl"), ("public_captions",), ("instruct", "endpoint"), ("instruct.jsonl", "public_filter.tsv")),
    "bench": StageSpec((), (), ("benchmark",), ("bench", "endpoint", "pipeline"), ("bench_report.tsv", "bench_trials.jsonl")),
}


class Counts:
    def __init__(self):
        self.n_in = 0
        self.n_out = 0
        self.dropped: Counter = Counter()
        self.details: dict = {}

    def to_obj(self) -> dict:
        return {"in": self.n_in, "out": self.n_out, "dropped": dict(sorted(self.dropped.items()))}


# ---------------------------------------------------------------- helpers

def make_client(cfg: RunConfig):
    ep = cfg.endpoint
    if ep is None:
        raise StageError("no endpoint configured")
    if ep.kind == "mock":
        return MockChatClient(offline_responder, model=ep.model or "offline-mock")
    return HttpChatClient(ep.url, ep.model, ep.api_key_env, ep.timeout_s)


def batch_policy(cfg: RunConfig) -> BatchPolicy:
    ep = cfg.endpoint
    return BatchPolicy(concurrency=ep.concurrency, retries=ep.retries, backoff_s=ep.backoff_s)


def _import_target(target: str):
    module, _, attr = target.partition(":")
    return getattr(importlib.import_module(module), attr)


def make_scorer(cfg: RunConfig):
    spec = cfg.instruct.scorer
    if spec["kind"] == "constant":
        value = float(spec["value"])
        return lambda entry: value
    return _import_target(spec["target"])


def _load_samples(path: Path) -> list[AlignedSample]:
    return [sample_from_obj(o) for o in _read_jsonl(path)]


# ---------------------------------------------------------------- stages

def stage_ingest(cfg: RunConfig, run_dir: Path, counts: Counts) -> None:
    records, diagnostics = [], []
    with open(cfg.path(cfg.inputs.features), encoding="utf-8") as fh:
        for item in parse_features(fh):
            counts.n_in += 1
            if isinstance(item, Diagnostic):
                diagnostics.append(item)
                counts.dropped[item.rule] += 1
                continue
            reason = discard_reason(item)
            if reason:
                counts.dropped[reason] += 1
                continue
            records.append(item)
    try:
        store = build_store(records)
    except ValueError as exc:
        raise StageError(str(exc)) from None
    counts.n_out = store.count
    (run_dir / "features.jsonl").write_text("".join(serialize_feature(r) + "\n" for r in store), encoding="utf-8")
    (run_dir / "diagnostics.tsv").write_text(
        "line\trule\tmessage\n" + "".join(d.to_line() + "\n" for d in diagnostics), encoding="utf-8"
    )


def stage_align(cfg: RunConfig, run_dir: Path, counts: Counts) -> None:
    with open(run_dir / "features.jsonl", encoding="utf-8") as fh:
        records = [r for r in parse_features(fh)]
    bad = [r for r in records if isinstance(r, Diagnostic)]
    if bad:
        raise StageError(f"features.jsonl line {bad[0].line}: {bad[0].rule}")
    store = build_store(records)
    predicates = []
    for name in cfg.align.predicates:
        factory = BUILTIN_PREDICATES.get(name) or _import_target(name)
        predicates.append((name, factory))
    pool, manifest = build_raw_pool(store, cfg.pipeline, predicates)
    counts.n_in = manifest.samples
    counts.n_out = manifest.retained
    counts.dropped.update(manifest.dropped)
    counts.details = {"features": manifest.features, "anchors": manifest.anchors}
    (run_dir / "raw_pool.jsonl").write_text(_jsonl(sample_to_obj(s) for s in pool), encoding="utf-8")
    (run_dir / "pool_manifest.json").write_text(json.dumps(manifest.to_obj(), indent=2) + "\n", encoding="utf-8")


def stage_prune(cfg: RunConfig, run_dir: Path, counts: Counts) -> None:
    wl_path = cfg.path(cfg.inputs.whitelist)
    wl = KeyWhitelist.from_file(wl_path) if wl_path else KeyWhitelist.default()
    samples = [s for s in _load_samples(run_dir / "raw_pool.jsonl") if s.is_retained]
    counts.n_in = len(samples)
    corpus = [(k, v) for s in samples for a in s.associated for k, v in a.tags.items()]
    lines = ["key\toccurrences\tdistinct_values\tauto_rules\twhitelisted"]
    if corpus:
        result = auto_filter_keys(corpus)
        for key, st in result.stats.items():
            rules = ",".join(result.rejected.get(key, ())) or "kept"
            lines.append(f"{key}\t{st.occurrences}\t{st.distinct_values}\t{rules}\t{'yes' if key in wl else 'no'}")
    (run_dir / "key_filter.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    kept = []
    for s in samples:
        pruned = apply_whitelist(s, wl)
        if pruned.is_retained:
            kept.append(pruned)
        else:
            counts.dropped[pruned.reason] += 1
    counts.n_out = len(kept)
    (run_dir / "pruned.jsonl").write_text(_jsonl(sample_to_obj(s) for s in kept), encoding="utf-8")


def stage_balance(cfg: RunConfig, run_dir: Path, counts: Counts) -> None:
    samples = _load_samples(run_dir / "pruned.jsonl")
    counts.n_in = len(samples)
    images = {s.id: dedup_pairs_per_image(s) for s in samples}
    result = balance(images, cfg.pipeline.balance_threshold, cfg.pipeline.rng_seed)
    keep = set(result.retained)
    counts.n_out = len(keep)
    if len(samples) > len(keep):
        counts.dropped["balance-dropped"] = len(samples) - len(keep)
    counts.details = {
        "phase1_removed": sum(d.phase1 == "removed" for d in result.audit),
        "readmitted": sum(d.final == "readmitted" for d in result.audit),
    }
    (run_dir / "balanced.jsonl").write_text(
        _jsonl(sample_to_obj(s) for s in samples if s.id in keep), encoding="utf-8"
    )
    (run_dir / "balance_audit.tsv").write_text(
        "image_id\tphase1\tprobability\tdraw\tfinal\n" + "".join(d.to_line() + "\n" for d in result.audit),
        encoding="utf-8",
    )
    pairs = sorted(result.counts.items(), key=lambda kv: (-kv[1], kv[0]))
    (run_dir / "pair_counts.tsv").write_text(
        "key\tvalue\timages\n" + "".join(f"{k}\t{v}\t{n}\n" for (k, v), n in pairs), encoding="utf-8"
    )
    if pairs:
        report.plot_pair_counts(result.counts, cfg.pipeline.balance_threshold, run_dir / "figures" / "pair_counts.png")


def stage_caption(cfg: RunConfig, run_dir: Path, counts: Counts) -> None:
    samples = _load_samples(run_dir / "balanced.jsonl")
    counts.n_in = len(samples)
    template = load_template(cfg.path(cfg.caption.template) if cfg.caption.template.endswith(".json") else cfg.caption.template)
    requests = [
        build_caption_request(s, template, temperature=cfg.caption.temperature,
                              top_p=cfg.caption.top_p, max_tokens=cfg.caption.max_tokens)
        for s in samples
    ]
    client = make_client(cfg)
    results = submit_batch(client, requests, batch_policy(cfg))
    records, dropped = assemble_records(samples, results, model=client.model)
    for reason in dropped.values():
        counts.dropped[reason] += 1
    counts.n_out = len(records)
    (run_dir / "captions.jsonl").write_text(_jsonl(r.to_obj() for r in records), encoding="utf-8")
    lines = ["sample_id\treason\terror"]
    for s, r in zip(samples, results):
        if s.id in dropped:
            lines.append(f"{s.id}\t{dropped[s.id]}\t{r.error or ''}")
    (run_dir / "caption_failures.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def stage_instruct(cfg: RunConfig, run_dir: Path, counts: Counts) -> None:
    ic = cfg.instruct
    samples = {s.id: s for s in _load_samples(run_dir / "balanced.jsonl")}
    captions = {c.sample_id: c for c in map(CaptionRecord.from_obj, _read_jsonl(run_dir / "captions.jsonl"))}
    captioned = [samples[i] for i in sorted(captions) if i in samples]
    rich = select_rich_samples(captioned, min(ic.rich_k, len(captioned)))
    jobs = []  # (request, source, sample or None)
    for s in rich:
        for kind in ic.kinds:
            req = build_instruct_prompt(captions[s.id].caption, s, kind, kv_sep=ic.kv_sep, max_tokens=ic.max_tokens)
            jobs.append((req, f"lhrs-align/{kind}", s))
    counts.n_in = len(jobs)

    filter_lines = ["image_id\tdecision\tsimilarity"]
    pub_path = cfg.path(cfg.inputs.public_captions)
    if pub_path is not None:
        entries = [PublicCaptionEntry.from_obj(o) for o in _read_jsonl(pub_path)]
        counts.n_in += len(entries)
        kept, rejected = filter_public_captions(entries, make_scorer(cfg), ic.min_tokens, ic.min_sim_pct)
        for entry in entries:
            if entry.image_id in rejected:
                counts.dropped[f"public:{rejected[entry.image_id]}"] += 1
                filter_lines.append(f"{entry.image_id}\t{rejected[entry.image_id]}\t")
        for entry in kept:
            filter_lines.append(f"{entry.image_id}\tkept\t{entry.similarity:g}")
            jobs.append((build_public_prompt(entry), "public-captions", entry))

    results = submit_batch(make_client(cfg), [j[0] for j in jobs], batch_policy(cfg))
    out = []
    for (req, source, item), res in zip(jobs, results):
        if not res.ok:
            counts.dropped["request-failed"] += 1
            continue
        turns = parse_conversation(res.text)
        if not turns:
            counts.dropped["unparseable-response"] += 1
            continue
        if isinstance(item, AlignedSample):
            size = item.extent.pixel_size
            boxes = tuple(normalize_box(a.pixel_box, size, size) for a in item.associated if a.tags)
            out.append(InstructionSample(turns, source, None, boxes, item.extent.acquisition_ref))
        else:
            out.append(InstructionSample(turns, source, None, (), item.image_id))
    counts.n_out = len(out)
    (run_dir / "instruct.jsonl").write_text(_jsonl(s.to_obj() for s in out), encoding="utf-8")
    (run_dir / "public_filter.tsv").write_text("\n".join(filter_lines) + "\n", encoding="utf-8")


def stage_bench(cfg: RunConfig, run_dir: Path, counts: Counts) -> None:
    with open(cfg.path(cfg.inputs.benchmark), encoding="utf-8") as fh:
        questions = load_benchmark(fh)
    counts.n_in = len(questions)
    rep = evaluate(make_client(cfg), questions, cfg.bench.trials, cfg.pipeline.rng_seed,
                   policy=cfg.bench.policy, concurrency=cfg.endpoint.concurrency)
    counts.n_out = len(questions)
    counts.details = {"overall_accuracy": round(rep.overall.accuracy, 6)}
    (run_dir / "bench_report.tsv").write_text(rep.to_tsv(), encoding="utf-8")
    (run_dir / "bench_trials.jsonl").write_text(_jsonl(t.to_obj() for t in rep.trials), encoding="utf-8")
    report.plot_bench_accuracy(rep, run_dir / "figures" / "bench_accuracy.png")


RUNNERS: dict[str, Callable[[RunConfig, Path, Counts], None]] = {
    "ingest": stage_ingest, "align": stage_align, "prune": stage_prune, "balance": stage_balance,
    "caption": stage_caption, "instruct": stage_instruct, "bench": stage_bench,
}


# ---------------------------------------------------------------- orchestration

def manifest_path(run_dir: Path, stage: str) -> Path:
    return run_dir / "manifests" / f"{stage}.json"


def read_manifest(run_dir: Path, stage: str) -> dict | None:
    p = manifest_path(run_dir, stage)
    if not p.is_file():
        return None
    return json.loads(p.read_text(encoding="utf-8"))


def _outputs_current(run_dir: Path, manifest: dict) -> bool:
    for name, digest in manifest["output_digests"].items():
        p = run_dir / name
        if not p.is_file() or file_digest(p) != digest:
            return False
    return True


def _input_digests(cfg: RunConfig, run_dir: Path, spec: StageSpec) -> dict[str, str]:
    digests = {}
    for name in spec.external_inputs:
        p = cfg.path(getattr(cfg.inputs, name))
        if p is not None:
            digests[f"input:{name}"] = file_digest(p)
    for name in spec.upstream_files:
        digests[name] = file_digest(run_dir / name)
    return digests


def _config_digest(cfg: RunConfig, spec: StageSpec) -> str:
    obj = {name: cfg.section(name) for name in spec.config_sections}
    return hashlib.sha256(_canonical(obj).encode()).hexdigest()


@contextmanager
def run_lock(run_dir: Path):
    lock = run_dir / ".vgi-align.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError(f"run directory {run_dir} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def run(cfg: RunConfig, stage: str, run_dir: str | Path | None = None) -> dict:
    """Execute one stage and return its manifest.

    A stage whose inputs, config and outputs all match its stored manifest is
    not re-executed; the returned manifest then has status ``skipped: up-to-date``.
    """
    if stage not in SPECS:
        raise ValueError(f"unknown stage {stage!r}")
    spec = SPECS[stage]
    run_dir = Path(run_dir if run_dir is not None else cfg.path(cfg.out_dir))
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "manifests").mkdir(exist_ok=True)
    if stage in cfg.stages and not cfg.stages[stage]:
        raise StageError(f"stage {stage!r} is disabled in the config")
    for dep in spec.requires:
        m = read_manifest(run_dir, dep)
        if m is None:
            raise OrderingError(f"stage {stage!r} requires stage {dep!r} to run first")
        if not _outputs_current(run_dir, m):
            raise OrderingError(f"outputs of stage {dep!r} changed since its manifest; rerun {dep!r}")

    with run_lock(run_dir):
        inputs = _input_digests(cfg, run_dir, spec)
        config_digest = _config_digest(cfg, spec)
        previous = read_manifest(run_dir, stage)
        if (
            previous is not None
            and previous["input_digests"] == inputs
            and previous["config_digest"] == config_digest
            and _outputs_current(run_dir, previous)
        ):
            log.info("stage %s is up to date", stage)
            return {**previous, "status": SKIPPED}

        counts = Counts()
        start = time.perf_counter()
        try:
            RUNNERS[stage](cfg, run_dir, counts)
        except (StageError, OrderingError):
            raise
        except Exception as exc:
            raise StageError(f"stage {stage!r} failed: {type(exc).__name__}: {exc}") from exc
        wall = time.perf_counter() - start
        if counts.n_in != counts.n_out + sum(counts.dropped.values()):
            raise StageError(f"stage {stage!r} count mismatch: {counts.to_obj()}")
        manifest = {
            "schema": MANIFEST_SCHEMA,
            "stage": stage,
            "status": "completed",
            "input_digests": inputs,
            "output_digests": {name: file_digest(run_dir / name) for name in spec.outputs},
            "counts": counts.to_obj(),
            "details": counts.details,
            "config_digest": config_digest,
            "seed": cfg.pipeline.rng_seed,
        }
        _write_atomic(manifest_path(run_dir, stage), json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        # wall time lives beside the manifest so the manifest itself stays reproducible
        _write_atomic(
            run_dir / "manifests" / f"{stage}.timing.json",
            json.dumps({"stage": stage, "wall_time_s": round(wall, 4)}) + "\n",
        )
        log.info("stage %s done: %s", stage, counts.to_obj())
        return manifest


def run_report(run_dir: str | Path) -> tuple[Path, Path]:
    run_dir = Path(run_dir)
    manifests = {s: m for s in STAGES if (m := read_manifest(run_dir, s)) is not None}
    tsv = run_dir / "stage_counts.tsv"
    tsv.write_text(report.stage_counts_tsv(manifests), encoding="utf-8")
    png = report.plot_stage_counts(manifests, run_dir / "figures" / "stage_counts.png")
    return tsv, png
