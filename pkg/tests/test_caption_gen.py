from __future__ import annotations

import json
from pathlib import Path

import pytest

from vgi_align.align_engine import AlignedSample, AssociatedFeature, ImageExtent
from vgi_align.caption_gen import (
    TemplateError,
    assemble_records,
    build_caption_request,
    load_template,
    serialize_tags,
)
from vgi_align.chat import BatchResult
from vgi_align.geo_core import GeoBBox

GOLDEN = Path(__file__).parent / "golden"
EXT = ImageExtent(GeoBBox(0, 0, 400, 400), 400.0, 400, 1.0, "ref")


def sample(*tag_dicts, sid=1, ids=None, **kw):
    ids = ids or range(1, len(tag_dicts) + 1)
    feats = tuple(AssociatedFeature(i, dict(t), (0, 0, 1, 1)) for i, t in zip(ids, tag_dicts))
    return AlignedSample(EXT, sid, feats, status="retained", **kw)


def test_single_feature():
    assert serialize_tags(sample({"landuse": "residential"})) == (
        "There are 1 tags contained in this image. Their keys and values are listed below:\n"
        "1. Key: landuse, Value: residential"
    )


def test_multi_tag_feature_on_one_line():
    text = serialize_tags(sample({"landuse": "residential"}, {"industrial": "factory", "landuse": "industrial"}))
    assert text.splitlines()[2] == "2. Key: industrial, Value: factory; Key: landuse, Value: industrial"


def test_features_sorted_by_id():
    s = sample({"a": "1"}, {"b": "2"}, ids=[9, 3])
    assert serialize_tags(s).splitlines()[1:] == ["1. Key: b, Value: 2", "2. Key: a, Value: 1"]
    assert serialize_tags(s) == serialize_tags(s)


def test_empty_sample_is_precondition_violation():
    with pytest.raises(ValueError):
        serialize_tags(AlignedSample(EXT, 1, ()))


def test_request_prefix_matches_golden():
    golden = json.loads((GOLDEN / "cap_gen_prefix.json").read_text(encoding="utf-8"))
    req = build_caption_request(sample({"landuse": "residential"}))
    assert req.messages[:5] == golden
    assert len(req.turns) == 5  # two few-shot exchanges plus the query
    assert (req.temperature, req.top_p, req.max_tokens) == (0.7, 0.95, 256)
    assert build_caption_request(sample({"landuse": "residential"}), temperature=0.4).temperature == 0.4
    assert req.to_json() == build_caption_request(sample({"landuse": "residential"})).to_json()


def test_template_errors(tmp_path):
    with pytest.raises(TemplateError):
        load_template(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(TemplateError):
        load_template(bad)
    bad.write_text('{"schema": "other"}', encoding="utf-8")
    with pytest.raises(TemplateError):
        load_template(bad)
    with pytest.raises(TemplateError):
        load_template("no_such_bundled_template")


def test_custom_template_file(tmp_path):
    path = tmp_path / "t.json"
    path.write_text(json.dumps({"schema": "vgi-align/prompt-template@1", "system": "S", "shots": []}), encoding="utf-8")
    req = build_caption_request(sample({"landuse": "farmland"}), path)
    assert req.messages[0] == {"role": "system", "content": "S"}
    assert len(req.turns) == 1


def _resp(i, text, ok=True):
    return BatchResult(i, text if ok else None, 1, None if ok else "boom", 12.5, "d")


def test_assemble_records():
    samples = [sample({"a": "b"}, sid=i, city="Zurich", country="Switzerland") for i in (1, 2, 3)]
    records, dropped = assemble_records(samples, [_resp(0, " A park. "), _resp(1, "  "), _resp(2, None, ok=False)], "m")
    assert [r.sample_id for r in records] == [1]
    assert records[0].caption == "A park."
    assert records[0].resolution == 1.0 and records[0].city == "Zurich"
    assert dropped == {2: "empty-caption", 3: "request-failed"}
    assert "latency_ms" not in records[0].to_obj()["trace"]
    assert records[0].to_obj(include_latency=True)["trace"]["latency_ms"] == 12.5


def test_assemble_length_mismatch():
    with pytest.raises(ValueError):
        assemble_records([sample({"a": "b"}, sid=i) for i in range(5)], [_resp(i, "x") for i in range(4)])
