"""Provider-neutral chat-completion contract, HTTP client and batch submission.

Wire format (POST to the configured URL, ``Authorization: Bearer <token>``)::

    request  {"model": str, "messages": [{"role": str, "content": str}, ...],
              "temperature": float, "top_p": float, "max_tokens": int,
              "attachments": [str, ...]}            # attachments only when present
    response {"text": str}
             or {"choices": [{"message": {"content": str}}]}
    error    non-2xx with {"error": str | {"message": str}}
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import httpx

log = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "VGI_ALIGN_API_KEY"


@dataclass(frozen=True)
class ChatRequest:
    system: str
    turns: tuple[tuple[str, str], ...]
    temperature: float = 0.7
    top_p: float = 0.95
    max_tokens: int = 256
    attachments: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple((r, c) for r, c in self.turns))
        if not self.turns or self.turns[-1][0] != "user":
            raise ValueError("the final turn must be a user turn")
        for i, (role, _) in enumerate(self.turns):
            expected = "user" if i % 2 == 0 else "assistant"
            if role != expected:
                raise ValueError(f"turn {i} has role {role!r}, expected {expected!r}")
        if not 0 < self.temperature <= 2:
            raise ValueError(f"temperature must be in (0, 2], got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if isinstance(self.max_tokens, bool) or not isinstance(self.max_tokens, int) or self.max_tokens <= 0:
            raise ValueError(f"max_tokens must be a positive int, got {self.max_tokens!r}")

    @property
    def messages(self) -> list[dict]:
        msgs = [{"role": "system", "content": self.system}] if self.system else []
        msgs.extend({"role": r, "content": c} for r, c in self.turns)
        return msgs

    @property
    def user_message(self) -> str:
        return self.turns[-1][1]

    def payload(self, model: str = "") -> dict:
        body = {
            "model": model,
            "messages": self.messages,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        }
        if self.attachments:
            body["attachments"] = list(self.attachments)
        return body

    def to_json(self) -> str:
        return json.dumps(self.payload(), ensure_ascii=False, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


class ChatServiceError(RuntimeError):
    def __init__(self, message: str, status: int | None = None, retryable: bool = True):
        super().__init__(message)
        self.status = status
        self.retryable = retryable


class ChatClient(Protocol):
    model: str

    def complete(self, request: ChatRequest) -> str: ...


class _SecretScrubber(logging.Filter):
    def __init__(self, secret: str):
        super().__init__()
        self.secret = secret

    def filter(self, record: logging.LogRecord) -> bool:
        if self.secret:
            msg = record.getMessage()
            if self.secret in msg:
                record.msg = msg.replace(self.secret, "***")
                record.args = None
        return True


def install_scrubber(secret: str, logger: logging.Logger | None = None) -> None:
    """Mask ``secret`` in every record passing through ``logger`` (root by default)."""
    target = logger or logging.getLogger()
    target.addFilter(_SecretScrubber(secret))
    for handler in target.handlers:
        handler.addFilter(_SecretScrubber(secret))


class HttpChatClient:
    def __init__(
        self,
        url: str,
        model: str = "",
        api_key_env: str = DEFAULT_API_KEY_ENV,
        timeout: float = 120.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.url = url
        self.model = model
        self.api_key_env = api_key_env
        self._token = os.environ.get(api_key_env, "")
        if self._token:
            install_scrubber(self._token, log)
        headers = {"Authorization": f"Bearer {self._token}"} if self._token else {}
        self._http = httpx.Client(timeout=timeout, headers=headers, transport=transport)

    def __repr__(self) -> str:
        return f"HttpChatClient(url={self.url!r}, model={self.model!r}, api_key_env={self.api_key_env!r})"

    def close(self) -> None:
        self._http.close()

    def complete(self, request: ChatRequest) -> str:
        try:
            resp = self._http.post(self.url, json=request.payload(self.model))
        except httpx.TransportError as exc:
            raise ChatServiceError(f"transport error: {type(exc).__name__}") from None
        if resp.status_code // 100 != 2:
            message = resp.text[:500]
            try:
                err = resp.json().get("error")
                message = err.get("message", message) if isinstance(err, dict) else str(err)
            except (ValueError, AttributeError):
                pass
            if self._token:
                # a server may echo the credential back; keep it out of traces and files
                message = message.replace(self._token, "***")
            retryable = resp.status_code == 429 or resp.status_code >= 500
            raise ChatServiceError(f"HTTP {resp.status_code}: {message}", resp.status_code, retryable)
        try:
            body = resp.json()
        except ValueError:
            raise ChatServiceError("response is not JSON") from None
        if isinstance(body.get("text"), str):
            return body["text"]
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise ChatServiceError("response has no text field", retryable=False) from None


class MockChatClient:
    """In-process client answering with ``responder(request)``."""

    def __init__(self, responder: Callable[[ChatRequest], str], model: str = "mock"):
        self.responder = responder
        self.model = model
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> str:
        with self._lock:
            self.calls += 1
        return self.responder(request)


def offline_responder(request: ChatRequest) -> str:
    """Deterministic stand-in for a served model, used by offline runs."""
    user = request.user_message
    if user.startswith("There are ") and "Key: " in user:
        pairs = []
        for line in user.splitlines()[1:]:
            for part in line.split("; "):
                if "Key: " in part and ", Value: " in part:
                    k, v = part.split("Key: ", 1)[1].split(", Value: ", 1)
                    pairs.append(f"{v.strip().replace('_', ' ')} {k.strip().replace('_', ' ')}")
        return "The image shows " + ", ".join(pairs) + "."
    if user.startswith("Please answer the question"):
        return "A"
    first = user.splitlines()[0] if user else ""
    return f"Question:\nWhat does the image show?\nAnswer:\n{first}"


@dataclass(frozen=True)
class BatchPolicy:
    concurrency: int = 4
    retries: int = 2
    backoff_s: float = 0.5
    backoff_factor: float = 2.0
    max_backoff_s: float = 30.0
    jitter: float = 0.0


@dataclass
class BatchResult:
    index: int
    text: str | None
    attempts: int
    error: str | None = None
    latency_ms: float = 0.0
    request_digest: str = ""
    trace: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.text is not None

    @property
    def retries(self) -> int:
        return self.attempts - 1


def _run_one(client, index: int, request: ChatRequest, policy: BatchPolicy, sleep) -> BatchResult:
    digest = request.digest()
    result = BatchResult(index, None, 0, request_digest=digest)
    delay = policy.backoff_s
    start = time.perf_counter()
    for attempt in range(policy.retries + 1):
        result.attempts = attempt + 1
        try:
            result.text = client.complete(request)
            result.error = None
            break
        except ChatServiceError as exc:
            result.error = str(exc)
            retryable = exc.retryable
        except Exception as exc:  # noqa: BLE001 - a client bug must not sink the batch
            result.error = f"{type(exc).__name__}: {exc}"
            retryable = True
        result.trace.append(f"attempt {attempt + 1}: {result.error}")
        if not retryable or attempt == policy.retries:
            break
        wait = min(delay, policy.max_backoff_s)
        if policy.jitter:
            wait *= 1 + random.uniform(-policy.jitter, policy.jitter)
        sleep(wait)
        delay *= policy.backoff_factor
    result.latency_ms = (time.perf_counter() - start) * 1000.0
    log.info(
        "chat request %d digest=%s attempts=%d ok=%s latency_ms=%.1f",
        index, digest[:12], result.attempts, result.ok, result.latency_ms,
    )
    return result


def submit_batch(
    client: ChatClient,
    requests: Sequence[ChatRequest],
    policy: BatchPolicy = BatchPolicy(),
    sleep: Callable[[float], None] = time.sleep,
) -> list[BatchResult]:
    """Send every request with bounded concurrency; results come back in input order."""
    if not requests:
        return []
    workers = max(1, min(policy.concurrency, len(requests)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_one, client, i, r, policy, sleep) for i, r in enumerate(requests)]
        return [f.result() for f in futures]
