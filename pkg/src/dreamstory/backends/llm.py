"""LLM clients: replay/record for tests, a rate limiter, and an HTTP adapter."""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from pathlib import Path
from typing import Callable, Sequence

from ..errors import LLMTransportError, ReplayMiss, SchemaError
from .base import LLMClient, Message

TRANSCRIPT_SCHEMA = "dreamstory.transcript.v1"


def message_hash(messages: Sequence[Message]) -> str:
    canon = json.dumps([[role, text] for role, text in messages], ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


class ReplayLLM:
    """Pure lookup client over a recorded transcript."""

    def __init__(self, entries: dict[str, str], model_id: str = "replay"):
        self._entries = dict(entries)
        self.model_id = model_id

    def complete(self, messages: Sequence[Message]) -> str:
        key = message_hash(messages)
        try:
            return self._entries[key]
        except KeyError:
            last = messages[-1][1] if messages else ""
            raise ReplayMiss(f"no recorded response for message hash {key[:12]} (last message: {last[:80]!r})")

    def __len__(self) -> int:
        return len(self._entries)


def load_transcript(path: str | Path) -> dict:
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(data, dict) or data.get("schema") != TRANSCRIPT_SCHEMA:
        raise SchemaError(f"expected schema {TRANSCRIPT_SCHEMA!r}", location=f"{path}:$.schema")
    for i, entry in enumerate(data.get("entries", [])):
        if not isinstance(entry, dict) or not {"hash", "response"} <= entry.keys():
            raise SchemaError("entry needs 'hash' and 'response'", location=f"{path}:$.entries[{i}]")
    return data


def make_replay_llm(transcript_path: str | Path) -> ReplayLLM:
    data = load_transcript(transcript_path)
    entries = {e["hash"]: e["response"] for e in data["entries"]}
    return ReplayLLM(entries, model_id=data.get("model_id", "replay"))


class RecordingLLM:
    """Wraps a client and keeps every exchange for later replay."""

    def __init__(self, inner: LLMClient):
        self.inner = inner
        self.model_id = inner.model_id
        self._lock = threading.Lock()
        self._entries: dict[str, dict] = {}

    def complete(self, messages: Sequence[Message]) -> str:
        response = self.inner.complete(messages)
        key = message_hash(messages)
        with self._lock:
            self._entries[key] = {
                "hash": key,
                "messages": [[r, t] for r, t in messages],
                "response": response,
            }
        return response

    def transcript(self) -> dict:
        entries = [self._entries[k] for k in sorted(self._entries)]
        return {"schema": TRANSCRIPT_SCHEMA, "model_id": self.model_id, "entries": entries}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.transcript(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
        return path


class CallableLLM:
    """Adapter turning a plain function into an LLMClient."""

    def __init__(self, fn: Callable[[Sequence[Message]], str], model_id: str = "callable"):
        self.fn = fn
        self.model_id = model_id

    def complete(self, messages: Sequence[Message]) -> str:
        return self.fn(messages)


class RateLimitedLLM:
    """Caps requests per minute across threads sharing one client."""

    def __init__(self, inner: LLMClient, requests_per_minute: float, clock=time.monotonic, sleep=time.sleep):
        if requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be positive")
        self.inner = inner
        self.model_id = inner.model_id
        self.interval = 60.0 / requests_per_minute
        self._clock, self._sleep = clock, sleep
        self._lock = threading.Lock()
        self._next = None

    def complete(self, messages: Sequence[Message]) -> str:
        with self._lock:
            now = self._clock()
            if self._next is not None and now < self._next:
                self._sleep(self._next - now)
                now = self._next
            self._next = now + self.interval
        return self.inner.complete(messages)


class OpenAIChatLLM:
    """Minimal client for OpenAI-compatible ``/chat/completions`` endpoints.

    Credentials come from ``DREAMSTORY_LLM_API_KEY`` (or ``OPENAI_API_KEY``);
    the endpoint from ``DREAMSTORY_LLM_BASE_URL`` (default api.openai.com).
    """

    def __init__(self, model: str, api_key: str | None = None, base_url: str | None = None,
                 temperature: float = 0.0, timeout: float = 120.0, transport=None):
        import httpx

        self.model_id = model
        self.temperature = temperature
        key = api_key or os.environ.get("DREAMSTORY_LLM_API_KEY") or os.environ.get("OPENAI_API_KEY")
        url = base_url or os.environ.get("DREAMSTORY_LLM_BASE_URL", "https://api.openai.com/v1")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._client = httpx.Client(base_url=url, headers=headers, timeout=timeout, transport=transport)

    def complete(self, messages: Sequence[Message]) -> str:
        import httpx

        body = {
            "model": self.model_id,
            "temperature": self.temperature,
            "messages": [{"role": r, "content": t} for r, t in messages],
        }
        try:
            resp = self._client.post("/chat/completions", json=body)
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
            raise LLMTransportError(f"{self.model_id}: {exc}") from exc
