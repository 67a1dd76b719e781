"""Chat-completion gateway: backends, retries, in-flight bound, cost ledger.

Two backends ship:

* ``ChatCompletionsBackend`` talks to an OpenAI-compatible
  ``/chat/completions`` endpoint.
* ``TranscriptBackend`` replays a JSON Lines transcript. Each record is::

      {"finding": "F1", "stage": "gre-generate", "attempt": 0,
       "text": "...", "input_tokens": 120, "output_tokens": 80}

  ``finding`` and ``attempt`` may be ``"*"`` to match anything. Lookup order
  is exact, then attempt wildcard, then finding wildcard, then both.
  Token fields are optional (estimated when absent).
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .errors import ConfigurationError, GatewayError, TranscriptExhaustedError, TransportError

log = logging.getLogger(__name__)

STAGES = ("bce-keys", "bce-links", "gre-generate", "gre-repair", "dv-extract", "dv-insert", "dv-verify")
DEFAULT_TEMPERATURE = 0.3
DEFAULT_MAX_IN_FLIGHT = 32


@dataclass(frozen=True)
class PromptPayload:
    system_text: str
    user_text: str
    stage: str
    finding_id: str = ""
    attempt: int | None = None
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage tag {self.stage!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must be within [0, 2]")


@dataclass(frozen=True)
class LlmReply:
    text: str
    input_tokens: int
    output_tokens: int
    latency: float
    backend: str
    estimated: bool = False


def estimate_tokens(text: str) -> int:
    """Whitespace-token count; used when the backend reports no usage."""
    return len(text.split())


# ----------------------------------------------------------------------------
# Cost ledger


@dataclass
class StageCost:
    input_tokens: int = 0
    output_tokens: int = 0
    seconds: float = 0.0
    calls: int = 0
    estimated: bool = False

    def add(self, other: "StageCost") -> None:
        self.input_tokens += other.input_tokens
        self.output_tokens += other.output_tokens
        self.seconds += other.seconds
        self.calls += other.calls
        self.estimated = self.estimated or other.estimated

    def to_json(self) -> dict:
        return {
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "seconds": round(self.seconds, 6),
            "calls": self.calls,
            "estimated": self.estimated,
        }


@dataclass(frozen=True)
class LedgerEntry:
    finding_id: str
    stage: str
    input_tokens: int
    output_tokens: int
    seconds: float
    calls: int
    estimated: bool
    timestamp: float


class CostLedger:
    """Append-only record of per-finding, per-stage usage. Thread safe."""

    def __init__(self) -> None:
        self._entries: list[LedgerEntry] = []
        self._lock = threading.Lock()

    def record(self, finding_id: str, stage: str, input_tokens: int = 0, output_tokens: int = 0,
               seconds: float = 0.0, calls: int = 1, estimated: bool = False) -> None:
        if input_tokens < 0 or output_tokens < 0:
            raise ValueError("token counts must be non-negative")
        entry = LedgerEntry(finding_id, stage, input_tokens, output_tokens, seconds, calls, estimated, time.monotonic())
        with self._lock:
            self._entries.append(entry)

    @contextmanager
    def timed(self, finding_id: str, stage: str):
        """Record wall time of a non-LLM phase (no call counted)."""
        start = time.monotonic()
        try:
            yield
        finally:
            self.record(finding_id, stage, seconds=time.monotonic() - start, calls=0)

    @property
    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._entries)

    def by_stage(self, finding_id: str | None = None) -> dict[str, StageCost]:
        out: dict[str, StageCost] = {}
        for e in self.entries:
            if finding_id is not None and e.finding_id != finding_id:
                continue
            out.setdefault(e.stage, StageCost()).add(
                StageCost(e.input_tokens, e.output_tokens, e.seconds, e.calls, e.estimated)
            )
        return out

    def totals(self, finding_id: str | None = None) -> StageCost:
        total = StageCost()
        for cost in self.by_stage(finding_id).values():
            total.add(cost)
        return total

    def finding_ids(self) -> list[str]:
        return sorted({e.finding_id for e in self.entries})

    def first_seen(self, finding_id: str) -> dict[str, float]:
        """Earliest timestamp per stage for one finding."""
        seen: dict[str, float] = {}
        for e in self.entries:
            if e.finding_id == finding_id and e.stage not in seen:
                seen[e.stage] = e.timestamp
        return seen

    def calls(self, finding_id: str, stage: str) -> int:
        return sum(e.calls for e in self.entries if e.finding_id == finding_id and e.stage == stage)

    def export(self, finding_id: str | None = None) -> dict:
        return {
            "stages": {k: v.to_json() for k, v in sorted(self.by_stage(finding_id).items())},
            "total": self.totals(finding_id).to_json(),
        }

    def write(self, path: Path | str) -> None:
        data = {fid: self.export(fid) for fid in self.finding_ids()}
        data["__all__"] = self.export()
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True), encoding="utf-8")


# ----------------------------------------------------------------------------
# Backends


class Backend(Protocol):
    name: str

    def complete(self, payload: PromptPayload) -> LlmReply: ...


class TranscriptBackend:
    """Replays scripted replies keyed by (finding id, stage, attempt index)."""

    name = "transcript"

    def __init__(self, records: list[dict]):
        self._table: dict[tuple[str, str, str], dict] = {}
        for n, rec in enumerate(records, start=1):
            try:
                key = (str(rec.get("finding", "*")), rec["stage"], str(rec.get("attempt", "*")))
            except KeyError:
                raise ConfigurationError(f"transcript record {n} lacks a stage") from None
            if key[1] not in STAGES:
                raise ConfigurationError(f"transcript record {n}: unknown stage {key[1]!r}")
            if key in self._table:
                raise ConfigurationError(f"transcript record {n}: duplicate key {key}")
            self._table[key] = rec
        self._counters: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()
        self.calls: list[PromptPayload] = []

    @classmethod
    def from_file(cls, path: Path | str) -> "TranscriptBackend":
        records = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ConfigurationError(f"{path}:{n}: {exc.msg}") from None
        return cls(records)

    def complete(self, payload: PromptPayload) -> LlmReply:
        with self._lock:
            if payload.attempt is None:
                key = (payload.finding_id, payload.stage)
                attempt = self._counters.get(key, 0)
                self._counters[key] = attempt + 1
            else:
                attempt = payload.attempt
            self.calls.append(payload)
        fid, stage, att = payload.finding_id, payload.stage, str(attempt)
        for key in ((fid, stage, att), (fid, stage, "*"), ("*", stage, att), ("*", stage, "*")):
            rec = self._table.get(key)
            if rec is not None:
                break
        else:
            raise TranscriptExhaustedError(f"no transcript entry for finding={fid!r} stage={stage} attempt={att}")
        text = rec.get("text", "")
        estimated = "input_tokens" not in rec or "output_tokens" not in rec
        prompt_text = payload.system_text + "\n" + payload.user_text
        return LlmReply(
            text=text,
            input_tokens=int(rec.get("input_tokens", estimate_tokens(prompt_text))),
            output_tokens=int(rec.get("output_tokens", estimate_tokens(text))),
            latency=0.0,
            backend=self.name,
            estimated=estimated,
        )


class ChatCompletionsBackend:
    """OpenAI-compatible HTTP client.

    Configuration falls back to ``POCVAL_LLM_BASE_URL``, ``POCVAL_LLM_API_KEY``
    and ``POCVAL_LLM_MODEL``.
    """

    name = "chat-completions"

    def __init__(self, base_url: str | None = None, api_key: str | None = None,
                 model: str | None = None, timeout: float = 600.0):
        self.base_url = (base_url or os.environ.get("POCVAL_LLM_BASE_URL", "")).rstrip("/")
        self.api_key = api_key or os.environ.get("POCVAL_LLM_API_KEY", "")
        self.model = model or os.environ.get("POCVAL_LLM_MODEL", "")
        if not self.base_url or not self.model:
            raise ConfigurationError("live LLM backend needs a base URL and a model name")
        import httpx

        self._client = httpx.Client(timeout=timeout)
        self._httpx = httpx

    def complete(self, payload: PromptPayload) -> LlmReply:
        body = {
            "model": self.model,
            "temperature": payload.temperature,
            "messages": [
                {"role": "system", "content": payload.system_text},
                {"role": "user", "content": payload.user_text},
            ],
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        start = time.monotonic()
        try:
            resp = self._client.post(f"{self.base_url}/chat/completions", json=body, headers=headers)
        except self._httpx.TransportError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise GatewayError(f"HTTP {resp.status_code}: {resp.text[:500]}")
        data = resp.json()
        text = data["choices"][0]["message"].get("content") or ""
        usage = data.get("usage") or {}
        estimated = "prompt_tokens" not in usage
        return LlmReply(
            text=text,
            input_tokens=int(usage.get("prompt_tokens", estimate_tokens(payload.system_text + "\n" + payload.user_text))),
            output_tokens=int(usage.get("completion_tokens", estimate_tokens(text))),
            latency=time.monotonic() - start,
            backend=f"{self.name}:{self.model}",
            estimated=estimated,
        )


# ----------------------------------------------------------------------------
# Gateway


class LlmGateway:
    """Shared front door for all LLM calls."""

    def __init__(self, backend: Backend, ledger: CostLedger | None = None,
                 max_in_flight: int = DEFAULT_MAX_IN_FLIGHT, retries: int = 3, backoff: float = 1.0):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        if retries < 1:
            raise ValueError("retries must be >= 1")
        self.backend = backend
        self.ledger = ledger if ledger is not None else CostLedger()
        self.retries = retries
        self.backoff = backoff
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._gauge = threading.Lock()
        self.in_flight = 0
        self.peak_in_flight = 0

    def complete(self, payload: PromptPayload) -> LlmReply:
        last: Exception | None = None
        for attempt in range(self.retries):
            with self._slots:
                with self._gauge:
                    self.in_flight += 1
                    self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
                start = time.monotonic()
                try:
                    reply = self.backend.complete(payload)
                except TransportError as exc:
                    last = exc
                    reply = None
                finally:
                    with self._gauge:
                        self.in_flight -= 1
            if reply is not None:
                self.ledger.record(
                    payload.finding_id, payload.stage, reply.input_tokens, reply.output_tokens,
                    seconds=time.monotonic() - start, estimated=reply.estimated,
                )
                return reply
            if attempt + 1 < self.retries:
                delay = self.backoff * (2 ** attempt)
                log.warning("transport error on %s (%s); retrying in %.1fs", payload.stage, last, delay)
                time.sleep(delay)
        raise GatewayError(f"{payload.stage}: transport failed after {self.retries} attempts: {last}")


_FENCE_RE = re.compile(r"```[^\n`]*\n(.*?)```", re.S)


def extract_code_block(reply: LlmReply | str) -> str:
    """Interior of the first fenced block, or the whole text when unfenced."""
    text = reply.text if isinstance(reply, LlmReply) else reply
    m = _FENCE_RE.search(text)
    if m:
        return m.group(1)
    log.warning("reply contains no fenced code block; using full text")
    return text
