"""Chat-completions-style endpoint clients.

Every model-facing role (generator, judge, VLM judge, summarizer, QA and
rewrite models) goes through the same minimal interface, so pipelines run
identically against a live server or a scripted stand-in.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import requests

logger = logging.getLogger(__name__)

Messages = list  # list of {"role": ..., "content": str | list[part]}

StopCheck = Callable[[str], "object"]  # returns protocol.StopDecision


class EndpointError(RuntimeError):
    """Endpoint unreachable or persistently failing after retries."""


@dataclass(frozen=True)
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


@dataclass(frozen=True)
class ChatResult:
    content: str
    usage: TokenUsage = field(default_factory=TokenUsage)


def message_text(message: dict) -> str:
    """Concatenated text parts of one message."""
    content = message.get("content", "")
    if isinstance(content, str):
        return content
    return "\n".join(p.get("text", "") for p in content if p.get("type") == "text")


def _truncate_at_stop(text: str, stop_check: StopCheck | None) -> str:
    if stop_check is None:
        return text
    decision = stop_check(text)
    if getattr(decision, "stopped", False) and decision.offset is not None:
        return text[: decision.offset]
    return text


class HttpChatEndpoint:
    """OpenAI-compatible chat completions over HTTP with bounded retries."""

    def __init__(
        self,
        base_url: str,
        api_key_env: str | None = None,
        model: str = "default",
        timeout: float = 120.0,
        max_retries: int = 2,
        session=None,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key_env = api_key_env
        self.model = model
        self.timeout = timeout
        self.max_retries = max_retries
        self._session = session or requests.Session()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env)
            if not key:
                raise EndpointError(f"API key environment variable {self.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    @staticmethod
    def _wire_messages(messages: Messages) -> list:
        wire = []
        for message in messages:
            content = message.get("content", "")
            if isinstance(content, list):
                parts = []
                for part in content:
                    if part.get("type") == "image":
                        parts.append(
                            {"type": "image_url", "image_url": {"url": f"file://{part['path']}"}}
                        )
                    else:
                        parts.append(part)
                content = parts
            wire.append({"role": message["role"], "content": content})
        return wire

    def complete(
        self,
        messages: Messages,
        *,
        temperature: float | None = None,
        seed: int | None = None,
        max_tokens: int | None = None,
        stop_check: StopCheck | None = None,
    ) -> ChatResult:
        payload = {"model": self.model, "messages": self._wire_messages(messages)}
        if temperature is not None:
            payload["temperature"] = temperature
        if seed is not None:
            payload["seed"] = seed
        if max_tokens is not None:
            payload["max_tokens"] = max_tokens

        last_error = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._session.post(
                    f"{self.base_url}/chat/completions",
                    json=payload,
                    headers=self._headers(),
                    timeout=self.timeout,
                )
                if resp.status_code >= 500:
                    raise EndpointError(f"server error {resp.status_code}")
                resp.raise_for_status()
                data = resp.json()
                content = data["choices"][0]["message"]["content"] or ""
                usage = data.get("usage", {})
                return ChatResult(
                    content=_truncate_at_stop(content, stop_check),
                    usage=TokenUsage(
                        prompt_tokens=int(usage.get("prompt_tokens", 0)),
                        completion_tokens=int(usage.get("completion_tokens", 0)),
                    ),
                )
            except (requests.RequestException, EndpointError, KeyError, ValueError) as exc:
                last_error = exc
                if attempt < self.max_retries:
                    time.sleep(min(2.0, 0.2 * (attempt + 1)))
        raise EndpointError(f"chat endpoint failed after {self.max_retries + 1} attempts: {last_error}")


class ScriptedEndpoint:
    """Deterministic endpoint driven by a script; no network, no state.

    Script forms:
      - callable(messages) -> str
      - list[str]: indexed by the number of assistant messages in the
        history (a conversation's turn counter), clamped to the last entry
      - dict with any of:
          "rules": [{"if_contains": ..., "respond": ...}] matched against
                   the last message's text, first match wins
          "by_question": {needle: [turn, ...]} matched against the first
                   user message
          "default": [turn, ...] or a single string
    """

    def __init__(self, script, chunk_size: int = 0, usages: list | None = None):
        self.script = script
        self.chunk_size = chunk_size
        self.usages = usages  # optional [(prompt, completion), ...] by turn index

    @classmethod
    def from_file(cls, path) -> "ScriptedEndpoint":
        with open(path, encoding="utf-8") as handle:
            return cls(json.load(handle))

    @staticmethod
    def _turn_index(messages: Messages) -> int:
        return sum(1 for m in messages if m.get("role") == "assistant")

    @staticmethod
    def _pick(turns, index: int) -> str:
        if isinstance(turns, str):
            return turns
        if not turns:
            return ""
        return turns[min(index, len(turns) - 1)]

    def _resolve(self, messages: Messages) -> str:
        if callable(self.script):
            return self.script(messages)
        if isinstance(self.script, list):
            return self._pick(self.script, self._turn_index(messages))
        last_text = message_text(messages[-1]) if messages else ""
        for rule in self.script.get("rules", []):
            if rule.get("if_contains", "") in last_text:
                return rule["respond"]
        first_user = next((m for m in messages if m.get("role") == "user"), None)
        question = message_text(first_user) if first_user else ""
        for needle, turns in self.script.get("by_question", {}).items():
            if needle in question:
                return self._pick(turns, self._turn_index(messages))
        return self._pick(self.script.get("default", ""), self._turn_index(messages))

    def _chunks(self, text: str) -> Iterable[str]:
        if self.chunk_size <= 0:
            yield text
            return
        for start in range(0, len(text), self.chunk_size):
            yield text[start : start + self.chunk_size]

    def complete(
        self,
        messages: Messages,
        *,
        temperature: float | None = None,
        seed: int | None = None,
        max_tokens: int | None = None,
        stop_check: StopCheck | None = None,
    ) -> ChatResult:
        full = self._resolve(messages)
        buffer = ""
        for chunk in self._chunks(full):
            buffer += chunk
            if stop_check is not None:
                decision = stop_check(buffer)
                if getattr(decision, "stopped", False) and decision.offset is not None:
                    buffer = buffer[: decision.offset]
                    break
        if self.usages:
            prompt, completion = self.usages[min(self._turn_index(messages), len(self.usages) - 1)]
            usage = TokenUsage(prompt_tokens=prompt, completion_tokens=completion)
        else:
            prompt_chars = sum(len(message_text(m)) for m in messages)
            usage = TokenUsage(
                prompt_tokens=prompt_chars // 4,
                completion_tokens=len(buffer) // 4 + 1,
            )
        return ChatResult(content=buffer, usage=usage)


def make_endpoint(base_url: str, api_key_env: str | None = None, **kwargs):
    """Endpoint factory: ``scripted:<path>`` files or live HTTP URLs."""
    if base_url.startswith("scripted:"):
        return ScriptedEndpoint.from_file(base_url[len("scripted:") :])
    return HttpChatEndpoint(base_url, api_key_env=api_key_env, **kwargs)
