from __future__ import annotations

import json
import logging
import random
import threading
import time

import httpx
import pytest

from vgi_align.chat import (
    BatchPolicy,
    ChatRequest,
    ChatServiceError,
    HttpChatClient,
    MockChatClient,
    offline_responder,
    submit_batch,
)

REQ = ChatRequest("sys", (("user", "hello"),))
NO_SLEEP = dict(sleep=lambda s: None)


def test_request_invariants():
    with pytest.raises(ValueError):
        ChatRequest("s", (("assistant", "x"),))
    with pytest.raises(ValueError):
        ChatRequest("s", (("user", "a"), ("user", "b")))
    with pytest.raises(ValueError):
        ChatRequest("s", (("user", "a"),), temperature=0)
    with pytest.raises(ValueError):
        ChatRequest("s", (("user", "a"),), top_p=1.5)
    with pytest.raises(ValueError):
        ChatRequest("s", (("user", "a"),), max_tokens=0)
    assert REQ.messages[0] == {"role": "system", "content": "sys"}


def test_batch_order_preserved_with_random_latency():
    rnd = random.Random(5)
    lock = threading.Lock()

    def responder(req):
        with lock:
            delay = rnd.uniform(0, 0.01)
        time.sleep(delay)
        return req.user_message.upper()

    reqs = [ChatRequest("", (("user", f"q{i}"),)) for i in range(40)]
    results = submit_batch(MockChatClient(responder), reqs, BatchPolicy(concurrency=8))
    assert [r.text for r in results] == [f"Q{i}" for i in range(40)]
    assert all(r.ok and r.retries == 0 for r in results)


def test_retry_then_success():
    calls = []

    def flaky(req):
        calls.append(1)
        if len(calls) == 1:
            raise ChatServiceError("busy", 503)
        return "ok"

    waits = []
    (res,) = submit_batch(MockChatClient(flaky), [REQ], BatchPolicy(retries=2, backoff_s=0.5), sleep=waits.append)
    assert res.text == "ok" and res.retries == 1
    assert waits == [0.5]


def test_always_failing_records_three_attempts():
    def fail(req):
        raise ChatServiceError("down", 500)

    waits = []
    (res,) = submit_batch(MockChatClient(fail), [REQ], BatchPolicy(retries=2, backoff_s=1.0), sleep=waits.append)
    assert not res.ok and res.attempts == 3
    assert "down" in res.error
    assert waits == [1.0, 2.0]
    assert len(res.trace) == 3


def test_non_retryable_stops_immediately():
    def reject(req):
        raise ChatServiceError("bad request", 400, retryable=False)

    (res,) = submit_batch(MockChatClient(reject), [REQ], BatchPolicy(retries=5), **NO_SLEEP)
    assert res.attempts == 1


def _client(handler, monkeypatch, token="s3cr3t-token"):
    monkeypatch.setenv("TEST_VGI_KEY", token)
    return HttpChatClient("https://llm.invalid/v1/chat", "m", "TEST_VGI_KEY", transport=httpx.MockTransport(handler))


def test_http_client_wire_format(monkeypatch):
    seen = {}

    def handler(request: httpx.Request):
        seen["auth"] = request.headers["authorization"]
        seen["body"] = json.loads(request.content)
        return httpx.Response(200, json={"choices": [{"message": {"content": "a caption"}}]})

    client = _client(handler, monkeypatch)
    assert client.complete(ChatRequest("s", (("user", "u"),), attachments=("img.png",))) == "a caption"
    assert seen["auth"] == "Bearer s3cr3t-token"
    assert seen["body"]["model"] == "m"
    assert seen["body"]["temperature"] == 0.7 and seen["body"]["top_p"] == 0.95
    assert seen["body"]["attachments"] == ["img.png"]


def test_http_errors(monkeypatch):
    responses = iter([
        httpx.Response(429, json={"error": {"message": "slow down"}}),
        httpx.Response(400, json={"error": "bad input"}),
        httpx.Response(200, text="not json"),
        httpx.Response(200, json={"text": "plain"}),
    ])
    client = _client(lambda r: next(responses), monkeypatch)
    with pytest.raises(ChatServiceError) as e:
        client.complete(REQ)
    assert e.value.retryable and "slow down" in str(e.value)
    with pytest.raises(ChatServiceError) as e:
        client.complete(REQ)
    assert not e.value.retryable and "bad input" in str(e.value)
    with pytest.raises(ChatServiceError):
        client.complete(REQ)
    assert client.complete(REQ) == "plain"


def test_transport_error_is_retryable(monkeypatch):
    def handler(request):
        raise httpx.ConnectError("refused")

    client = _client(handler, monkeypatch)
    (res,) = submit_batch(client, [REQ], BatchPolicy(retries=1), **NO_SLEEP)
    assert res.attempts == 2 and not res.ok


def test_credential_never_logged(monkeypatch, caplog):
    token = "sk-very-secret-value"

    def handler(request):
        return httpx.Response(500, json={"error": f"invalid key {token}"})

    caplog.set_level(logging.DEBUG)
    client = _client(handler, monkeypatch, token=token)
    logging.getLogger("vgi_align.chat").warning("debug dump %s", token)
    results = submit_batch(client, [REQ], BatchPolicy(retries=1), **NO_SLEEP)
    assert token not in repr(client)
    assert token not in caplog.text
    assert "***" in caplog.text
    assert all(token not in t for t in results[0].trace)
    assert token not in results[0].error
    assert token not in json.dumps(REQ.payload("m"))


def test_offline_responder_shapes():
    cap = offline_responder(ChatRequest("", (("user", "There are 1 tags contained in this image. Their keys and values are listed below:\n1. Key: landuse, Value: farmland"),)))
    assert cap == "The image shows farmland landuse."
    assert offline_responder(ChatRequest("", (("user", "Please answer the question based on the given choices:\nQuestion: q"),))) == "A"
    assert offline_responder(ChatRequest("", (("user", "caption\nline"),))).startswith("Question:")
