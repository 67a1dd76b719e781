from __future__ import annotations

import json
from pathlib import Path

import pytest

from pocval.harness import FakeExecutor
from pocval.llm import CostLedger, LlmGateway, TranscriptBackend

FIXTURES = Path(__file__).resolve().parent / "fixtures"
PROJECTS = FIXTURES / "projects"


def load_transcript() -> list[dict]:
    return [json.loads(ln) for ln in (FIXTURES / "transcript.jsonl").read_text().splitlines() if ln.strip()]


def gateway(records: list[dict] | None = None, **kw) -> LlmGateway:
    backend = TranscriptBackend(load_transcript() if records is None else records)
    return LlmGateway(backend, CostLedger(), backoff=0.0, **kw)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def projects_dir() -> Path:
    return PROJECTS


@pytest.fixture
def golden_llm() -> LlmGateway:
    return gateway()


@pytest.fixture
def golden_executor() -> FakeExecutor:
    return FakeExecutor.from_file(FIXTURES / "executor.json")
