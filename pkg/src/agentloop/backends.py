"""Model backends: the chat-completion contract, a deterministic scripted
mock for offline replay, and a thin HTTP client.

A backend is anything with::

    complete(messages, temperature=0.0, max_tokens=None) -> BackendResponse

where messages is an ordered list of (role, content) pairs. Backends must be
safe to call concurrently (the voting path may fan out).
"""

from __future__ import annotations

import json
import os
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

from .accounting import count_tokens
from .errors import BackendFailure, FixtureMismatch

Messages = list[tuple[str, str]]


@dataclass(frozen=True)
class BackendResponse:
    text: str
    prompt_tokens: int
    completion_tokens: int


def _prompt_text(messages: Messages) -> str:
    return "\n".join(content for _role, content in messages)


class ScriptSource:
    """Shared cursor over a list of scripted completions, consumed in call order.

    Entries are either a bare completion string or an object with:
      completion        the text to return (required)
      role              expected caller role, asserted when present
      expect_substring  must occur in the rendered prompt, asserted when present
      prompt_tokens / completion_tokens   usage overrides
      fail              if true, raise BackendFailure instead of answering
    """

    def __init__(self, entries: list) -> None:
        self.entries = [self._normalize(e) for e in entries]
        self.index = 0
        self._lock = threading.Lock()

    @staticmethod
    def _normalize(entry) -> dict:
        if isinstance(entry, str):
            return {"completion": entry}
        if isinstance(entry, dict) and "completion" in entry:
            return entry
        raise ValueError(f"bad script entry: {entry!r}")

    def next_entry(self, role: str, prompt: str) -> dict:
        with self._lock:
            if self.index >= len(self.entries):
                raise BackendFailure(
                    f"script exhausted after {len(self.entries)} completions ({role} call)"
                )
            entry = self.entries[self.index]
            self.index += 1
        expected_role = entry.get("role")
        if expected_role is not None and expected_role != role:
            raise FixtureMismatch(
                f"script entry {self.index - 1} expects a {expected_role} call, got {role}"
            )
        needle = entry.get("expect_substring")
        if needle is not None and needle not in prompt:
            raise FixtureMismatch(
                f"script entry {self.index - 1}: {needle!r} not found in prompt"
            )
        if entry.get("fail"):
            raise BackendFailure(f"scripted failure at entry {self.index - 1}")
        return entry


def load_script(path: str | Path) -> ScriptSource:
    """Load a script from a JSON list or a JSONL file (one entry per line)."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.strip()
    if stripped.startswith("["):
        return ScriptSource(json.loads(stripped))
    entries = [json.loads(line) for line in stripped.splitlines() if line.strip()]
    return ScriptSource(entries)


@dataclass
class ScriptedBackend:
    """Deterministic mock backend replaying a shared script."""

    source: ScriptSource
    role: str = "brain"
    model: str = "mock"
    prompts: list[str] = field(default_factory=list)

    def complete(
        self, messages: Messages, temperature: float = 0.0, max_tokens: int | None = None
    ) -> BackendResponse:
        prompt = _prompt_text(messages)
        self.prompts.append(prompt)
        entry = self.source.next_entry(self.role, prompt)
        text = entry["completion"]
        return BackendResponse(
            text=text,
            prompt_tokens=entry.get("prompt_tokens", count_tokens(prompt)),
            completion_tokens=entry.get("completion_tokens", count_tokens(text)),
        )


@dataclass
class HttpChatBackend:
    """Minimal chat-completion HTTP client (OpenAI-style wire format)."""

    base_url: str
    model: str
    api_key_env: str = "AGENTLOOP_API_KEY"
    request_timeout: float = 120.0

    def complete(
        self, messages: Messages, temperature: float = 0.0, max_tokens: int | None = None
    ) -> BackendResponse:
        payload: dict = {
            "model": self.model,
            "messages": [{"role": role, "content": content} for role, content in messages],
            "temperature": temperature,
        }
        if max_tokens is not None:
            payload["max_tokens"] = max_tokens
        key = os.environ.get(self.api_key_env, "")
        request = urllib.request.Request(
            self.base_url.rstrip("/") + "/chat/completions",
            data=json.dumps(payload).encode("utf-8"),
            headers={
                "Content-Type": "application/json",
                "Authorization": f"Bearer {key}",
            },
        )
        try:
            with urllib.request.urlopen(request, timeout=self.request_timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise BackendFailure(f"backend request failed: {exc}") from exc
        try:
            text = body["choices"][0]["message"]["content"]
            usage = body.get("usage", {})
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendFailure(f"malformed backend response: {body!r}") from exc
        prompt_text = _prompt_text(messages)
        return BackendResponse(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens", count_tokens(prompt_text))),
            completion_tokens=int(usage.get("completion_tokens", count_tokens(text))),
        )
