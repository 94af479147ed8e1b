"""Model client: remote chat-completions backend, scripted replayer, and
the journal wrapper that makes every session reconstructible.

The journal is write-ahead: request text and metadata hit disk before the
backend is called, the response lands right after it returns. A session
directory's calls/ folder is therefore always an honest record of what was
sent, even across a crash mid-call.
"""
from __future__ import annotations

import json
import os
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Tuple

import requests

from .errors import (
    JournalIncomplete,
    ModelUnavailable,
    NoCodeBlock,
    ResponseTooLarge,
    ScriptExhausted,
)
from .prompts import PromptKind

DEFAULT_MAX_OUTPUT_CHARS = 200_000
DEFAULT_TEMPERATURE = 1.0
API_KEY_ENV = "KERNEL_AGENT_API_KEY"

_FENCE_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class ModelRequest:
    prompt: str
    kind: PromptKind
    request_id: str
    max_output_chars: int = DEFAULT_MAX_OUTPUT_CHARS
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self) -> None:
        if self.max_output_chars < 1:
            raise ValueError("max_output_chars must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not self.request_id:
            raise ValueError("request_id must be non-empty")


class ModelClient(Protocol):
    def complete(self, request: ModelRequest) -> str: ...


def extract_code_block(text: str) -> str:
    """Contents of the last fenced code block; models narrate first and
    put the real answer last."""
    matches = _FENCE_RE.findall(text)
    if not matches:
        raise NoCodeBlock("response contains no fenced code block")
    return matches[-1].strip("\n")


def _check_size(request: ModelRequest, response: str) -> str:
    if len(response) > request.max_output_chars:
        raise ResponseTooLarge(
            f"response is {len(response)} chars, cap is "
            f"{request.max_output_chars}")
    return response


# ---------------------------------------------------------------------------
# scripted backend
# ---------------------------------------------------------------------------

@dataclass
class ScriptedResponseSet:
    """Responses keyed by prompt kind, consumed in occurrence order."""
    responses: Dict[PromptKind, List[str]] = field(default_factory=dict)

    def take(self, kind: PromptKind, occurrence: int) -> str:
        queue = self.responses.get(kind, [])
        if occurrence >= len(queue):
            raise ScriptExhausted(
                f"script has {len(queue)} {kind.value} responses, "
                f"occurrence {occurrence + 1} requested")
        return queue[occurrence]

    def counts(self) -> Dict[str, int]:
        return {k.value: len(v) for k, v in self.responses.items()}


def load_model_script(path: Path) -> ScriptedResponseSet:
    """Fixture format: {"responses": {kind: [text | {"file": relpath}]}};
    file entries are read relative to the fixture's directory."""
    path = Path(path)
    data = json.loads(path.read_text())
    out: Dict[PromptKind, List[str]] = {}
    for kind_s, items in data.get("responses", {}).items():
        kind = PromptKind(kind_s)
        texts = []
        for item in items:
            if isinstance(item, dict) and "file" in item:
                texts.append((path.parent / item["file"]).read_text())
            else:
                texts.append(str(item))
        out[kind] = texts
    return ScriptedResponseSet(responses=out)


class ScriptedModelClient:
    def __init__(self, script: ScriptedResponseSet):
        self.script = script
        self._occurrences: Dict[PromptKind, int] = {}

    def complete(self, request: ModelRequest) -> str:
        n = self._occurrences.get(request.kind, 0)
        response = self.script.take(request.kind, n)
        self._occurrences[request.kind] = n + 1
        return _check_size(request, response)


# ---------------------------------------------------------------------------
# remote backend
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RemoteConfig:
    endpoint_url: str
    model: str
    timeout_s: float = 120.0

    @classmethod
    def from_file(cls, path: Path) -> "RemoteConfig":
        data = json.loads(Path(path).read_text())
        try:
            return cls(endpoint_url=str(data["endpoint_url"]),
                       model=str(data["model"]),
                       timeout_s=float(data.get("timeout_s", 120.0)))
        except KeyError as e:
            raise ModelUnavailable(f"{path}: remote config missing {e}")


class RemoteModelClient:
    """One chat-completion call per request against an OpenAI-style
    endpoint. Endpoint and model name come from the config file; the key
    comes from the environment and is never persisted anywhere."""

    MAX_ATTEMPTS = 3
    BACKOFF_BASE_S = 1.0

    def __init__(self, config: RemoteConfig, *, sleep=time.sleep):
        self.config = config
        self._sleep = sleep
        if not os.environ.get(API_KEY_ENV):
            raise ModelUnavailable(f"{API_KEY_ENV} is not set")

    def _call_once(self, request: ModelRequest) -> str:
        resp = requests.post(
            self.config.endpoint_url,
            headers={"Authorization": f"Bearer {os.environ[API_KEY_ENV]}",
                     "Content-Type": "application/json"},
            json={"model": self.config.model,
                  "messages": [{"role": "user", "content": request.prompt}],
                  "temperature": request.temperature},
            timeout=self.config.timeout_s)
        if resp.status_code == 429 or resp.status_code >= 500:
            raise _Retryable(f"HTTP {resp.status_code}")
        if resp.status_code != 200:
            raise ModelUnavailable(
                f"endpoint rejected the request: HTTP {resp.status_code}: "
                f"{resp.text[:300]}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise _Retryable(f"malformed completion payload: {e}")

    def complete(self, request: ModelRequest) -> str:
        last = "no attempt made"
        for attempt in range(1, self.MAX_ATTEMPTS + 1):
            try:
                return _check_size(request, self._call_once(request))
            except (_Retryable, requests.RequestException) as e:
                last = str(e)
                if attempt < self.MAX_ATTEMPTS:
                    self._sleep(self.BACKOFF_BASE_S * 2 ** (attempt - 1))
        raise ModelUnavailable(
            f"model endpoint failed after {self.MAX_ATTEMPTS} attempts: {last}")


class _Retryable(Exception):
    pass


# ---------------------------------------------------------------------------
# journal
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JournalCall:
    seq: int
    kind: PromptKind
    request_id: str
    request_text: str
    response_text: Optional[str]


class JournaledClient:
    """Wraps any backend; persists every call under calls/ before and
    after the inner complete."""

    def __init__(self, inner: ModelClient, calls_dir: Path):
        self.inner = inner
        self.calls_dir = Path(calls_dir)
        self.calls_dir.mkdir(parents=True, exist_ok=True)
        self._seq = 0

    def complete(self, request: ModelRequest) -> str:
        self._seq += 1
        stem = self.calls_dir / f"{self._seq:04d}"
        stem.with_suffix(".request.txt").write_text(request.prompt)
        stem.with_suffix(".meta.json").write_text(json.dumps({
            "seq": self._seq,
            "kind": request.kind.value,
            "request_id": request.request_id,
            "temperature": request.temperature,
            "max_output_chars": request.max_output_chars,
        }, indent=2))
        response = self.inner.complete(request)
        stem.with_suffix(".response.txt").write_text(response)
        return response


def read_journal(calls_dir: Path) -> List[JournalCall]:
    """Load all journaled calls in sequence order. A request without a
    response is kept (response_text None) so callers can decide whether a
    trailing in-flight call is acceptable."""
    calls_dir = Path(calls_dir)
    calls = []
    for meta_path in sorted(calls_dir.glob("*.meta.json")):
        meta = json.loads(meta_path.read_text())
        stem = calls_dir / f"{meta['seq']:04d}"
        request_path = stem.with_suffix(".request.txt")
        if not request_path.is_file():
            raise JournalIncomplete(f"call {meta['seq']}: request file missing")
        response_path = stem.with_suffix(".response.txt")
        calls.append(JournalCall(
            seq=meta["seq"],
            kind=PromptKind(meta["kind"]),
            request_id=meta["request_id"],
            request_text=request_path.read_text(),
            response_text=(response_path.read_text()
                           if response_path.is_file() else None),
        ))
    expected = list(range(1, len(calls) + 1))
    if [c.seq for c in calls] != expected:
        raise JournalIncomplete(
            f"journal sequence has gaps: {[c.seq for c in calls]}")
    return calls


def script_from_journal(calls: List[JournalCall]) -> ScriptedResponseSet:
    """Rebuild the scripted response set a replay needs. Every call must
    have its response on disk."""
    responses: Dict[PromptKind, List[str]] = {}
    for call in calls:
        if call.response_text is None:
            raise JournalIncomplete(
                f"call {call.seq} ({call.kind.value}) has no response; "
                f"cannot replay an interrupted session")
        responses.setdefault(call.kind, []).append(call.response_text)
    return ScriptedResponseSet(responses=responses)
