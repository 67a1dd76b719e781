"""Prompt templates for every LLM-backed stage.

Section order of the generation prompt is fixed: project and build
metadata, the finding, the code slice, the one-shot exemplar. Repair prompts
reuse that schema and append the latest draft and its diagnostics only.
"""

from __future__ import annotations

from importlib import resources
from typing import TYPE_CHECKING, Sequence

if TYPE_CHECKING:
    from .bce import BugContextBundle
    from .findings import Finding

MARKER_PREFIX = "SMARTPOC"

GENERATION_SECTIONS = (
    "## 1. Project information and build metadata",
    "## 2. Static finding",
    "## 3. Bug-related code",
    "## 4. Output format exemplar",
)
PREVIOUS_DRAFT_HEADING = "## 5. Previous test (latest attempt)"
DIAGNOSTICS_HEADING = "## 6. Diagnostics from the latest attempt"


def default_exemplar() -> str:
    return resources.files("pocval").joinpath("templates/exemplar.t.sol").read_text(encoding="utf-8")


# --- bug-context extraction --------------------------------------------------

KEYS_SYSTEM = (
    "You are a smart-contract auditor. Given a static-analysis finding and the list of "
    "functions defined in the project, name the functions the finding refers to. "
    'Answer with a JSON array of function names only, e.g. ["withdraw"].'
)


def keys_user(f: "Finding", catalog: Sequence[str]) -> str:
    locs = ", ".join(f.function_names) or "(none reported)"
    return (
        f"Finding ({f.tool or 'unknown tool'}, severity {f.severity}):\n{f.narrative}\n\n"
        f"Reported locations: {locs}\n\n"
        "Functions defined in the project:\n" + "\n".join(f"- {n}" for n in catalog)
    )


LINKS_SYSTEM = """You relate Solidity functions by their signatures.
Two kinds of link exist:
- inverse: operations with opposing effects (deposit/withdraw, mint/burn, stake/unstake).
- state-coupled: operations that read and update the same state (setFee/checkFee, setPrice/getPrice).
For every key function, pick counterparts from the candidate list only.
Answer with a JSON array of objects {"source": key, "target": candidate, "kind": "inverse"|"state-coupled"}.
Answer [] when nothing fits.

Example
Key functions: mint(address to, uint256 amount)
Candidates: burn(address from, uint256 amount); name(); setFee(uint256 fee)
Answer: [{"source": "mint", "target": "burn", "kind": "inverse"}]

Example
Key functions: setFee(uint256 fee)
Candidates: checkFee(uint256 amount); owner(); deposit()
Answer: [{"source": "setFee", "target": "checkFee", "kind": "state-coupled"}]
"""


def links_user(key_sigs: Sequence[str], candidate_sigs: Sequence[str]) -> str:
    return (
        "Key functions: " + "; ".join(key_sigs) + "\n"
        "Candidates:\n" + "\n".join(f"- {s}" for s in candidate_sigs)
    )


# --- generate / repair --------------------------------------------------------

GENERATION_SYSTEM = (
    "You write Foundry proof-of-concept tests for reported smart-contract vulnerabilities. "
    "The test must compile with the stated compiler, import the target contract from the given "
    "path, and demonstrate the reported condition. Never redefine or modify target contracts. "
    "Return the complete test file in one ```solidity fenced block."
)

REPAIR_INSTRUCTIONS = (
    "The previous test failed. Revise it in direct response to the diagnostics, keep the parts "
    "that already work, and return the complete updated Foundry test."
)


def generation_user(f: "Finding", bundle: "BugContextBundle", exemplar: str,
                    target_imports: Sequence[str]) -> str:
    meta = bundle.build_metadata
    project = [
        f"Compiler: solc {meta.compiler_version} (pragma solidity {meta.pragma})",
        "Remappings: " + (", ".join(meta.remappings) if meta.remappings else "(none)"),
        "Target contracts: " + ", ".join(bundle.target_contracts),
        "Import the targets with: " + "; ".join(f'import "{p}";' for p in target_imports),
        "Test file: test/Name.t.sol",
    ]
    finding = [
        f"Tool: {f.tool or 'unknown'}",
        f"Severity: {f.severity}",
        f"Functions: {', '.join(bundle.key_functions)}",
        f"Description: {f.narrative}",
    ]
    if f.vuln_type:
        finding.insert(2, f"Type: {f.vuln_type}")
    return "\n\n".join([
        GENERATION_SECTIONS[0] + "\n" + "\n".join(project),
        GENERATION_SECTIONS[1] + "\n" + "\n".join(finding),
        GENERATION_SECTIONS[2] + "\n```solidity\n" + bundle.assembled_text.rstrip() + "\n```",
        GENERATION_SECTIONS[3] + "\n```solidity\n" + exemplar.rstrip() + "\n```",
    ])


def repair_user(base: str, previous_draft: str, diagnostics: str) -> str:
    return "\n\n".join([
        base,
        PREVIOUS_DRAFT_HEADING + "\n```solidity\n" + previous_draft.rstrip() + "\n```",
        DIAGNOSTICS_HEADING + "\n```\n" + diagnostics.rstrip() + "\n```",
        REPAIR_INSTRUCTIONS,
    ])


# --- differential verification ------------------------------------------------

EXTRACT_SYSTEM = (
    "You choose a runtime oracle for a proof-of-concept test. From the public ABI listed, select "
    "(a) the action: one or a few public calls that exercise the reported trigger, and (b) the "
    "observable state: getters or view functions whose value should change if the vulnerability "
    "is real. Use only entries from the ABI list, copied verbatim. Answer with JSON: "
    '{"action": [...], "state": [...], "rationale": "...", "expected_direction": "..."}'
)


def extract_user(f: "Finding", poc_text: str, abi: Sequence[str]) -> str:
    return (
        f"Finding: {f.narrative}\n\n"
        "Proof-of-concept test:\n```solidity\n" + poc_text.rstrip() + "\n```\n\n"
        "Public ABI:\n" + "\n".join(f"- {d}" for d in abi)
    )


MARKER_GRAMMAR = (
    f"Each instrumentation log line must have exactly the shape {MARKER_PREFIX}|<phase>|<query-id>|<value> "
    "where <phase> is PRE, TRIGGER or POST, <query-id> names the state query or action (no '|'), "
    "and <value> is the observed value as text. Emit them with console.log or emit log_string."
)

INSERT_SYSTEM = (
    "You instrument a passing Foundry proof-of-concept test for differential verification. "
    "Before the trigger, perform the action and read every state query; log each result with a PRE "
    "marker. Log one TRIGGER marker at the trigger. After the trigger, repeat the same action and "
    "queries and log each result with a POST marker. Use try/catch for calls that may revert and "
    "log the success flag. Do not change the exploit logic. " + MARKER_GRAMMAR +
    " Return the complete test file in one ```solidity fenced block."
)


def insert_user(poc_text: str, action: Sequence[str], state: Sequence[str], expected: str) -> str:
    return (
        "Test to instrument:\n```solidity\n" + poc_text.rstrip() + "\n```\n\n"
        "Action:\n" + ("\n".join(f"- {a}" for a in action) or "- (none)") + "\n\n"
        "State queries:\n" + ("\n".join(f"- {s}" for s in state) or "- (none)") + "\n\n"
        f"Expected change: {expected or '(unspecified)'}"
    )


VERIFY_SYSTEM = (
    "You judge whether observed state changes around a proof-of-concept trigger are evidence of "
    "the reported vulnerability. Reply on the first line with exactly VALIDATED, or with "
    "NOT VALIDATED: <reason>."
)


def verify_user(f: "Finding", action: Sequence[str], state: Sequence[str], expected: str,
                deltas: dict[str, tuple[str, str]]) -> str:
    rows = "\n".join(f"- {q}: {before!r} -> {after!r}" for q, (before, after) in deltas.items())
    return (
        f"Finding: {f.narrative}\n\n"
        "Action: " + ", ".join(action) + "\n"
        "State queries: " + ", ".join(state) + "\n"
        f"Expected change: {expected or '(unspecified)'}\n\n"
        "Observed deltas (pre -> post):\n" + rows
    )
