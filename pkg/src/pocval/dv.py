"""Action-state differential verification.

The LLM picks an action and state queries from the public ABI, the PoC is
instrumented to log them before and after its trigger, and the verdict rests
on the observed deltas. Log lines follow a strict marker grammar:

    SMARTPOC|<PRE|TRIGGER|POST>|<query-id>|<value>

Query ids may not contain ``|``; the value is everything after the third
separator. Values compare as exact text after trimming whitespace.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import prompts
from .bce import BugContextBundle
from .engine import EngineConfig, EngineResult, PoCDraft, run_loop, sanitize_draft
from .errors import GatewayError, SnapshotMismatchError, StageError
from .findings import Finding
from .harness import Diagnostics, Executor, Workspace
from .llm import LlmGateway, PromptPayload, extract_code_block
from .solidity import CallableDescriptor

log = logging.getLogger(__name__)

VALIDATED = "Validated"
NOT_VALIDATED = "NotValidated"
GENERATION_FAILED = "GenerationFailed"
DECISIONS = (VALIDATED, NOT_VALIDATED, GENERATION_FAILED)

PHASES = ("PRE", "TRIGGER", "POST")
MARKER_RE = re.compile(r"^" + prompts.MARKER_PREFIX + r"\|(PRE|TRIGGER|POST)\|([^|]+)\|(.*)$")
REQUIRED_LITERALS = tuple(f"{prompts.MARKER_PREFIX}|{p}" for p in PHASES)


@dataclass
class DVPlan:
    action: list[CallableDescriptor]
    state_queries: list[CallableDescriptor]
    rationale: str = ""
    expected_direction: str = ""
    dropped: list[str] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not self.action and not self.state_queries

    def to_json(self) -> dict:
        return {
            "action": [str(d) for d in self.action],
            "state_queries": [str(d) for d in self.state_queries],
            "rationale": self.rationale,
            "expected_direction": self.expected_direction,
            "dropped": self.dropped,
        }


@dataclass
class StateSnapshot:
    phase: str  # pre | post
    values: dict[str, str] = field(default_factory=dict)


@dataclass
class MarkerLog:
    pre: StateSnapshot
    post: StateSnapshot
    triggers: list[str]
    lines: list[str]  # matched marker lines, verbatim and in order


@dataclass
class Verdict:
    finding_id: str
    decision: str
    reason: str = ""
    assessment: str = ""
    pre: dict[str, str] = field(default_factory=dict)
    post: dict[str, str] = field(default_factory=dict)
    deltas: dict[str, tuple[str, str]] = field(default_factory=dict)
    markers: list[str] = field(default_factory=list)
    plan: dict | None = None
    costs: dict = field(default_factory=dict)
    status: str = "ok"  # ok | rejected | error
    gre_attempts: int = 0
    dv_attempts: int = 0

    def __post_init__(self) -> None:
        if self.decision not in DECISIONS:
            raise ValueError(f"unknown decision {self.decision!r}")
        if self.decision == VALIDATED and not self.deltas:
            raise ValueError("a Validated verdict needs at least one delta")

    @property
    def positive(self) -> bool:
        return self.decision == VALIDATED

    def to_json(self) -> dict:
        return {
            "finding_id": self.finding_id,
            "decision": self.decision,
            "status": self.status,
            "reason": self.reason,
            "assessment": self.assessment,
            "evidence": {
                "pre": self.pre,
                "post": self.post,
                "deltas": {k: list(v) for k, v in self.deltas.items()},
            },
            "markers": self.markers,
            "plan": self.plan,
            "attempts": {"gre": self.gre_attempts, "dv_insert": self.dv_attempts},
            "costs": self.costs,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Verdict":
        ev = d.get("evidence", {})
        att = d.get("attempts", {})
        return cls(
            finding_id=d["finding_id"],
            decision=d["decision"],
            reason=d.get("reason", ""),
            assessment=d.get("assessment", ""),
            pre=dict(ev.get("pre", {})),
            post=dict(ev.get("post", {})),
            deltas={k: (v[0], v[1]) for k, v in ev.get("deltas", {}).items()},
            markers=list(d.get("markers", [])),
            plan=d.get("plan"),
            costs=d.get("costs", {}),
            status=d.get("status", "ok"),
            gre_attempts=att.get("gre", 0),
            dv_attempts=att.get("dv_insert", 0),
        )

    def write(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True), encoding="utf-8")


# ----------------------------------------------------------------------------
# Extraction


def _norm(s: str) -> str:
    return re.sub(r"\s+", "", s)


def _abi_index(abi: Sequence[CallableDescriptor]) -> dict[str, CallableDescriptor | None]:
    """Spellings the LLM may use for each descriptor; ambiguous ones map to None."""
    index: dict[str, CallableDescriptor | None] = {}

    def put(key: str, d: CallableDescriptor) -> None:
        key = _norm(key)
        if key in index and index[key] is not d:
            index[key] = None
        else:
            index[key] = d

    for d in abi:
        put(str(d), d)
        put(str(d).split(".", 1)[1], d)
        put(d.ref, d)
        put(f"{d.name}({','.join(d.param_types)})", d)
        put(d.name, d)
    return index


def _match(entries: Iterable, index: dict, dropped: list[str]) -> list[CallableDescriptor]:
    out: list[CallableDescriptor] = []
    for e in entries:
        raw = str(e)
        key = _norm(raw)
        d = index.get(key)
        if d is None and "(" not in key:
            d = index.get(key.rsplit(".", 1)[-1])
        if d is None:
            log.info("dv plan: dropping %r (not in the public ABI)", raw)
            dropped.append(raw)
        elif d not in out:
            out.append(d)
    return out


def _parse_plan_json(text: str) -> dict | None:
    body = extract_code_block(text) if "```" in text else text
    start, end = body.find("{"), body.rfind("}")
    if start == -1 or end < start:
        return None
    try:
        data = json.loads(body[start:end + 1])
    except json.JSONDecodeError:
        return None
    return data if isinstance(data, dict) else None


def extract_plan(f: Finding, poc: PoCDraft, abi: Sequence[CallableDescriptor], llm: LlmGateway) -> DVPlan:
    """Ask for an action and state queries, keeping only ABI members."""
    if not abi:
        return DVPlan([], [], dropped=[], rationale="public ABI is empty")
    payload = PromptPayload(
        prompts.EXTRACT_SYSTEM, prompts.extract_user(f, poc.text, [str(d) for d in abi]),
        "dv-extract", f.id, 0,
    )
    try:
        reply = llm.complete(payload)
    except GatewayError as exc:
        raise StageError("dv", f"extraction call failed: {exc}") from exc
    data = _parse_plan_json(reply.text)
    if data is None:
        log.warning("dv plan for %s: reply is not a JSON object", f.id)
        return DVPlan([], [], rationale="unparseable extraction reply")
    index = _abi_index(abi)
    dropped: list[str] = []

    def as_list(v) -> list:
        return v if isinstance(v, list) else ([v] if v else [])

    action = _match(as_list(data.get("action")), index, dropped)
    state = _match(as_list(data.get("state") or data.get("state_queries")), index, dropped)
    return DVPlan(action, state, str(data.get("rationale", "")), str(data.get("expected_direction", "")), dropped)


# ----------------------------------------------------------------------------
# Markers and diffing


def parse_markers(lines: Iterable[str]) -> MarkerLog:
    """Strict marker parse. The first occurrence of an id within a phase wins."""
    pre = StateSnapshot("pre")
    post = StateSnapshot("post")
    triggers: list[str] = []
    matched: list[str] = []
    for line in lines:
        m = MARKER_RE.match(line.strip())
        if not m:
            continue
        matched.append(line.strip())
        phase, qid, value = m.group(1), m.group(2).strip(), m.group(3).strip()
        if phase == "TRIGGER":
            triggers.append(qid)
            continue
        snap = pre if phase == "PRE" else post
        snap.values.setdefault(qid, value)
    return MarkerLog(pre, post, triggers, matched)


def diff_snapshots(pre: StateSnapshot, post: StateSnapshot) -> dict[str, tuple[str, str]]:
    if not pre.values or not post.values:
        raise SnapshotMismatchError(
            f"missing {'pre' if not pre.values else 'post'} snapshot: the test emitted no marker logs for it"
        )
    if set(pre.values) != set(post.values):
        only_pre = sorted(set(pre.values) - set(post.values))
        only_post = sorted(set(post.values) - set(pre.values))
        raise SnapshotMismatchError(f"query ids differ: pre-only {only_pre}, post-only {only_post}")
    return {
        q: (pre.values[q].strip(), post.values[q].strip())
        for q in pre.values
        if pre.values[q].strip() != post.values[q].strip()
    }


# ----------------------------------------------------------------------------
# Instrumentation


def marker_precheck(draft: PoCDraft) -> Diagnostics | None:
    missing = [lit for lit in REQUIRED_LITERALS if lit not in draft.text]
    if not missing:
        return None
    return Diagnostics(
        "instrument", False,
        "instrumentation incomplete: the test never emits " + ", ".join(missing)
        + ". " + prompts.MARKER_GRAMMAR,
    )


def insert_instrumentation(f: Finding, poc: PoCDraft, plan: DVPlan, bundle: BugContextBundle,
                           ws: Workspace, config: EngineConfig, llm: LlmGateway, executor: Executor,
                           attempts_dir: Path | None = None) -> EngineResult:
    """Instrument the passing PoC and drive it through the engine loop (fresh budget)."""
    base = prompts.insert_user(poc.text, [str(d) for d in plan.action],
                               [str(d) for d in plan.state_queries], plan.expected_direction)

    def prompt_fn(k: int, prev):
        user = base if prev is None else prompts.repair_user(base, prev[0].text, prev[1].render())
        return PromptPayload(prompts.INSERT_SYSTEM, user, "dv-insert", f.id, k, config.temperature)

    return run_loop(
        prompt_fn, lambda d: sanitize_draft(d, bundle), ws, executor, llm, config.retry_budget,
        check=marker_precheck, attempts_dir=attempts_dir,
    )


# ----------------------------------------------------------------------------
# Verdict

_VERDICT_STRIP = "*#` \t"


def parse_assessment(text: str) -> tuple[str, str]:
    """Map the verify reply to (decision, reason) using its first non-empty line."""
    first = next((ln.strip().strip(_VERDICT_STRIP) for ln in text.splitlines() if ln.strip(_VERDICT_STRIP + "\r")), "")
    head = re.sub(r"\s+", " ", first.upper())
    if head.startswith("NOT VALIDATED") or head.startswith("NOTVALIDATED"):
        reason = first.split(":", 1)[1].strip() if ":" in first else "assessment rejected the deltas"
        return NOT_VALIDATED, reason
    if re.match(r"VALIDATED\b", head):
        return VALIDATED, ""
    return NOT_VALIDATED, f"unparseable assessment: {first[:80]!r}"


def render_verdict(f: Finding, plan: DVPlan, deltas: dict[str, tuple[str, str]], llm: LlmGateway,
                   pre: StateSnapshot | None = None, post: StateSnapshot | None = None) -> Verdict:
    pre_v = dict(pre.values) if pre else {}
    post_v = dict(post.values) if post else {}
    if not deltas:
        return Verdict(f.id, NOT_VALIDATED, "no state delta between pre and post", pre=pre_v, post=post_v,
                       plan=plan.to_json())
    payload = PromptPayload(
        prompts.VERIFY_SYSTEM,
        prompts.verify_user(f, [str(d) for d in plan.action], [str(d) for d in plan.state_queries],
                            plan.expected_direction, deltas),
        "dv-verify", f.id, 0,
    )
    try:
        reply = llm.complete(payload)
    except GatewayError as exc:
        raise StageError("dv", f"verification call failed: {exc}") from exc
    decision, reason = parse_assessment(reply.text)
    return Verdict(f.id, decision, reason, reply.text.strip(), pre_v, post_v, dict(deltas), plan=plan.to_json())


def run_dv(f: Finding, poc: PoCDraft, bundle: BugContextBundle, ws: Workspace, config: EngineConfig,
           llm: LlmGateway, executor: Executor, attempts_dir: Path | None = None) -> Verdict:
    """Full DV stage for a PoC that already compiles and passes."""
    plan = extract_plan(f, poc, bundle.public_abi, llm)
    if plan.empty:
        reason = "no action or state query from the public ABI"
        if plan.dropped:
            reason += f" (dropped: {', '.join(plan.dropped)})"
        return Verdict(f.id, NOT_VALIDATED, reason, plan=plan.to_json())
    result = insert_instrumentation(f, poc, plan, bundle, ws, config, llm, executor, attempts_dir)
    if not result.success:
        last = result.last_diagnostics.render() if result.last_diagnostics else ""
        return Verdict(f.id, GENERATION_FAILED, "instrumentation exhausted its retry budget",
                       assessment=last[-2000:], plan=plan.to_json(), dv_attempts=result.attempts_used)
    markers = parse_markers(result.outcome.logs)
    try:
        deltas = diff_snapshots(markers.pre, markers.post)
    except SnapshotMismatchError as exc:
        v = Verdict(f.id, NOT_VALIDATED, f"snapshot mismatch: {exc}", pre=dict(markers.pre.values),
                    post=dict(markers.post.values), plan=plan.to_json())
    else:
        v = render_verdict(f, plan, deltas, llm, markers.pre, markers.post)
    v.markers = markers.lines
    v.dv_attempts = result.attempts_used
    return v
