"""Generate-repair-execute loop.

Each attempt asks the LLM for a draft, runs the deterministic sanitizer,
writes the test, compiles and runs it. A failure carries the sanitized draft
and its diagnostics into the next prompt; only the latest pair is kept.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import prompts
from .bce import BugContextBundle
from .errors import PocvalError, SanitizeError
from .findings import Finding
from .harness import (
    DEFAULT_TIMEOUT, Diagnostics, ExecutionOutcome, Executor, Workspace, execute,
    target_import_path, write_test,
)
from .llm import DEFAULT_TEMPERATURE, LlmGateway, PromptPayload, extract_code_block
from .solidity import canonical_type, is_legacy_compiler, mask_source, scan_source

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 5


@dataclass(frozen=True)
class PoCDraft:
    text: str
    attempt_index: int = 0
    provenance: str = "generated"  # generated | sanitized | carried


@dataclass
class EngineConfig:
    retry_budget: int = DEFAULT_BUDGET
    temperature: float = DEFAULT_TEMPERATURE
    exemplar: str = field(default_factory=prompts.default_exemplar)
    timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self) -> None:
        if self.retry_budget < 1:
            raise ValueError("retry budget must be >= 1")


@dataclass
class AttemptRecord:
    index: int
    stage: str
    draft: PoCDraft
    diagnostics: Diagnostics | None


@dataclass
class EngineResult:
    success: bool
    attempts_used: int
    draft: PoCDraft | None = None
    outcome: ExecutionOutcome | None = None
    last_diagnostics: Diagnostics | None = None
    history: list[AttemptRecord] = field(default_factory=list)


# ----------------------------------------------------------------------------
# Prompts


def target_imports(bundle: BugContextBundle) -> list[str]:
    return [target_import_path(p) for p in bundle.build_metadata.target_files]


def build_generation_prompt(f: Finding, bundle: BugContextBundle,
                            prev: tuple[PoCDraft, Diagnostics] | None = None,
                            config: EngineConfig | None = None, attempt: int = 0) -> PromptPayload:
    config = config or EngineConfig()
    base = prompts.generation_user(f, bundle, config.exemplar, target_imports(bundle))
    if prev is None:
        return PromptPayload(prompts.GENERATION_SYSTEM, base, "gre-generate", f.id, attempt, config.temperature)
    draft, diag = prev
    user = prompts.repair_user(base, draft.text, diag.render())
    return PromptPayload(prompts.GENERATION_SYSTEM, user, "gre-repair", f.id, attempt, config.temperature)


# ----------------------------------------------------------------------------
# Sanitizer

_PRAGMA_SOL_RE = re.compile(r"pragma\s+solidity\s+([^;]*);")
_ABI_V2_RE = re.compile(r"pragma\s+(?:experimental\s+ABIEncoderV2|abicoder\s+v2)\s*;")
_IMPORT_RE = re.compile(r"\bimport\b[^;]*;")
_CONTRACT_RE = re.compile(r"\b(?:contract|library|interface)\s+[A-Za-z_$][\w$]*[^{;]*\{")
LEGACY_ABI_DIRECTIVE = "pragma experimental ABIEncoderV2;"


def _norm_constraint(c: str) -> str:
    return re.sub(r"\s+", "", c)


def _cut(text: str, start: int, end: int) -> str:
    """Remove ``text[start:end]`` plus its line when nothing else is on it."""
    line_start = text.rfind("\n", 0, start) + 1
    if text[line_start:start].strip() == "":
        start = line_start
    nl = text.find("\n", end)
    tail_end = len(text) if nl == -1 else nl + 1
    if text[end:tail_end].strip() == "":
        end = tail_end
    return text[:start] + text[end:]


def _remove_conflicts(text: str, bundle: BugContextBundle) -> str:
    try:
        scan = scan_source("draft", text)
    except PocvalError as exc:
        log.info("sanitizer: draft does not parse (%s); skipping conflict removal", exc)
        return text
    project = set(bundle.project_contracts) | set(bundle.target_contracts)
    sigs = {(name, tuple(types)) for name, types in bundle.catalog_signatures}
    spans: list[tuple[int, int]] = []
    removed_contracts = []
    for c in scan.contracts:
        if c.name in project:
            spans.append((c.span.start, c.span.end))
            removed_contracts.append(c)
    for fn in scan.functions:
        if fn.kind != "function" or any(c.span.start <= fn.span.start < c.span.end for c in removed_contracts):
            continue
        key = (fn.simple_name, tuple(canonical_type(p.type) for p in fn.parameters))
        if key in sigs:
            spans.append((fn.span.start, fn.span.end))
    for start, end in sorted(spans, reverse=True):
        text = _cut(text, start, end)
    return text


def _align_pragma(text: str, pragma: str) -> str:
    wanted = f"pragma solidity {pragma};"
    m = _PRAGMA_SOL_RE.search(mask_source(text))
    if m is None:
        return wanted + "\n" + text
    if _norm_constraint(text[m.start(1):m.end(1)]) == _norm_constraint(pragma):
        return text
    return text[:m.start()] + wanted + text[m.end():]


def _ensure_abi_v2(text: str) -> str:
    masked = mask_source(text)
    if _ABI_V2_RE.search(masked):
        return text
    m = _PRAGMA_SOL_RE.search(masked)
    at = m.end() if m else 0
    nl = text.find("\n", at)
    at = len(text) if nl == -1 else nl + 1
    sep = "" if at == 0 or text[at - 1] == "\n" else "\n"
    return text[:at] + sep + LEGACY_ABI_DIRECTIVE + "\n" + text[at:]


def _ensure_imports(text: str, paths: list[str]) -> str:
    for path in paths:
        base = path.rsplit("/", 1)[-1]
        masked = mask_source(text)
        found = False
        for m in reversed(list(_IMPORT_RE.finditer(masked))):
            stmt = text[m.start():m.end()]
            q = re.search(r"([\"'])([^\"']+)\1", stmt)
            if not q or q.group(2).rsplit("/", 1)[-1] != base:
                continue
            found = True
            if q.group(2) != path:
                s = m.start() + q.start(2)
                e = m.start() + q.end(2)
                text = text[:s] + path + text[e:]
        if found:
            continue
        masked = mask_source(text)
        imports = list(_IMPORT_RE.finditer(masked))
        anchors = imports or list(re.finditer(r"\bpragma\b[^;]*;", masked))
        at = anchors[-1].end() if anchors else 0
        nl = text.find("\n", at)
        at = len(text) if nl == -1 else nl + 1
        sep = "" if at == 0 or text[at - 1] == "\n" else "\n"
        text = text[:at] + sep + f'import "{path}";\n' + text[at:]
    return text


def sanitize_draft(draft: PoCDraft, bundle: BugContextBundle) -> PoCDraft:
    """Deterministic pre-execution fixes; only the draft is edited.

    Rewrites the solidity pragma to the target's constraint, adds the legacy
    ABI directive for pre-0.8 targets, enforces the target import path, and
    removes functions (and contracts) that duplicate target definitions.
    """
    text = draft.text
    if not text.strip() or not _CONTRACT_RE.search(mask_source(text)):
        raise SanitizeError("draft contains no contract body")
    meta = bundle.build_metadata
    text = _remove_conflicts(text, bundle)
    if not _CONTRACT_RE.search(mask_source(text)):
        raise SanitizeError("draft only redefines target contracts")
    text = _align_pragma(text, meta.pragma)
    if is_legacy_compiler(meta.compiler_version):
        text = _ensure_abi_v2(text)
    text = _ensure_imports(text, target_imports(bundle))
    return PoCDraft(text, draft.attempt_index, "sanitized")


# ----------------------------------------------------------------------------
# Loop


PromptFn = Callable[[int, "tuple[PoCDraft, Diagnostics] | None"], PromptPayload]
CheckFn = Callable[[PoCDraft], "Diagnostics | None"]


def _persist(attempts_dir: Path | None, k: int, payload: PromptPayload, draft: PoCDraft,
             diag: Diagnostics | None) -> None:
    if attempts_dir is None:
        return
    d = attempts_dir / str(k)
    d.mkdir(parents=True, exist_ok=True)
    (d / "prompt.txt").write_text(payload.system_text + "\n\n" + payload.user_text, encoding="utf-8")
    (d / "draft.sol").write_text(draft.text, encoding="utf-8", errors="replace")
    (d / "diagnostics.txt").write_text((diag.render() if diag else "[ok]") + "\n", encoding="utf-8")


def run_loop(prompt_fn: PromptFn, sanitize: Callable[[PoCDraft], PoCDraft], ws: Workspace,
             executor: Executor, llm: LlmGateway, budget: int,
             check: CheckFn | None = None, attempts_dir: Path | None = None) -> EngineResult:
    """Shared generate / sanitize / execute / repair loop.

    Gateway and environment errors propagate; they are not attempt failures.
    """
    history: list[AttemptRecord] = []
    prev: tuple[PoCDraft, Diagnostics] | None = None
    last: Diagnostics | None = None
    for k in range(budget):
        payload = prompt_fn(k, prev)
        reply = llm.complete(payload)
        raw = PoCDraft(extract_code_block(reply), k, "generated")
        try:
            draft = sanitize(raw)
            diag = check(draft) if check else None
        except SanitizeError as exc:
            draft, diag = PoCDraft(raw.text, k, "carried"), Diagnostics("sanitize", False, f"sanitizer rejected draft: {exc}")
        if diag is not None:
            history.append(AttemptRecord(k, payload.stage, draft, diag))
            _persist(attempts_dir, k, payload, draft, diag)
            prev, last = (draft, diag), diag
            continue
        write_test(ws, draft)
        outcome = execute(ws, executor)
        failure = outcome.failure
        history.append(AttemptRecord(k, payload.stage, draft, failure))
        _persist(attempts_dir, k, payload, draft, failure)
        if failure is None:
            return EngineResult(True, k + 1, draft, outcome, None, history)
        prev, last = (draft, failure), failure
    return EngineResult(False, budget, None, None, last, history)


def run_engine(f: Finding, bundle: BugContextBundle, ws: Workspace, config: EngineConfig,
               llm: LlmGateway, executor: Executor, attempts_dir: Path | None = None) -> EngineResult:
    """PoC generation for one finding under retry budget ``config.retry_budget``."""

    def prompt_fn(k, prev):
        return build_generation_prompt(f, bundle, prev, config, attempt=k)

    return run_loop(
        prompt_fn, lambda d: sanitize_draft(d, bundle), ws, executor, llm,
        config.retry_budget, attempts_dir=attempts_dir,
    )
