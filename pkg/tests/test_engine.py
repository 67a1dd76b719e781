import re

import pytest
from hypothesis import given, settings

from pocval.bce import assemble_bundle
from pocval.engine import (
    LEGACY_ABI_DIRECTIVE, EngineConfig, PoCDraft, build_generation_prompt, run_engine, sanitize_draft,
)
from pocval.errors import GatewayError, SanitizeError
from pocval.findings import Finding
from pocval.harness import Diagnostics, FakeExecutor, FakeRun, init_workspace
from pocval.prompts import DIAGNOSTICS_HEADING, GENERATION_SECTIONS, PREVIOUS_DRAFT_HEADING
from pocval.solidity import parse_project, parse_sources

from conftest import PROJECTS, gateway
from gen import sanitizer_cases

FINDING = Finding("E", "slither", "nft_vuln", "Anyone can mint tokens", "High", ("mint",))


@pytest.fixture(scope="module")
def bundle():
    m = parse_project(PROJECTS / "nft_vuln")
    return assemble_bundle(FINDING, m, {"Collectible.mint": 0, "Collectible._mint": 1}, [], ["Collectible.mint"])


@pytest.fixture
def ws(bundle, tmp_path):
    return init_workspace("E", bundle, PROJECTS / "nft_vuln", tmp_path)


CLEAN = """pragma solidity ^0.8.13;

import "forge-std/Test.sol";
import "../src/Collectible.sol";

contract PoCTest is Test {
    Collectible nft;

    function setUp() public {
        nft = new Collectible();
    }

    function testExploit() public {
        nft.mint(address(this), 1);
    }
}
"""


def test_clean_draft_is_unchanged(bundle):
    out = sanitize_draft(PoCDraft(CLEAN), bundle)
    assert out.text == CLEAN and out.provenance == "sanitized"


def test_duplicate_definition_removed_only(bundle):
    dup = "    function mint(address to, uint256 id) public {\n        to; id;\n    }\n"
    draft = CLEAN.replace("    function setUp", dup + "\n    function setUp")
    out = sanitize_draft(PoCDraft(draft), bundle).text
    assert out == CLEAN.replace("    function setUp", "\n    function setUp")


def test_overload_is_not_a_conflict(bundle):
    ovl = "    function mint(address to) public {}\n"
    draft = CLEAN.replace("    function setUp", ovl + "    function setUp")
    assert sanitize_draft(PoCDraft(draft), bundle).text == draft


def test_pragma_and_import_fixes(bundle):
    draft = CLEAN.replace("^0.8.13", "^0.8.0").replace("../src/Collectible.sol", "src/Collectible.sol")
    assert sanitize_draft(PoCDraft(draft), bundle).text == CLEAN
    no_header = CLEAN.replace("pragma solidity ^0.8.13;\n", "").replace('import "../src/Collectible.sol";\n', "")
    out = sanitize_draft(PoCDraft(no_header), bundle).text
    assert out.startswith("pragma solidity ^0.8.13;\n")
    assert 'import "forge-std/Test.sol";\nimport "../src/Collectible.sol";\n' in out


def test_legacy_target_gets_abi_directive():
    m = parse_sources({"src/Old.sol": "pragma solidity ^0.6.12;\ncontract Old { function f() public {} }\n"})
    b = assemble_bundle(FINDING, m, ["Old.f"], [])
    out = sanitize_draft(PoCDraft("pragma solidity ^0.6.12;\ncontract T { function testX() public {} }\n"), b).text
    assert out.splitlines()[:2] == ["pragma solidity ^0.6.12;", LEGACY_ABI_DIRECTIVE]
    assert sanitize_draft(PoCDraft(out), b).text == out


def test_redefined_target_contract_removed(bundle):
    draft = CLEAN.replace("contract PoCTest", "contract Collectible {\n    function mint() public {}\n}\n\ncontract PoCTest")
    assert sanitize_draft(PoCDraft(draft), bundle).text == CLEAN.replace("contract PoCTest", "\ncontract PoCTest")


@pytest.mark.parametrize("text", ["", "   \n", "just prose, no code", "contract Collectible { }\n"])
def test_unsalvageable(bundle, text):
    with pytest.raises(SanitizeError):
        sanitize_draft(PoCDraft(text), bundle)


# --- generated properties -------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(case=sanitizer_cases())
def test_sanitizer_properties(case):
    meta = case.bundle.build_metadata
    out = sanitize_draft(PoCDraft(case.draft), case.bundle).text
    assert sanitize_draft(PoCDraft(out), case.bundle).text == out
    for blk in case.keep:
        assert blk in out
    for blk in case.conflicting:
        assert blk not in out
    assert "contract Target" not in out
    assert re.search(r"pragma solidity ([^;]*);", out).group(1) == meta.pragma
    assert (LEGACY_ABI_DIRECTIVE in out) == meta.compiler_version.startswith(("0.6", "0.7"))
    assert 'import "../src/Target.sol";' in out


# --- prompts ----------------------------------------------------------------------------

def test_prompt_sections_in_order(bundle):
    p = build_generation_prompt(FINDING, bundle)
    idx = [p.user_text.index(s) for s in GENERATION_SECTIONS]
    assert idx == sorted(idx)
    assert p.stage == "gre-generate" and PREVIOUS_DRAFT_HEADING not in p.user_text
    assert DIAGNOSTICS_HEADING not in p.user_text
    assert 'import "../src/Collectible.sol";' in p.user_text
    assert build_generation_prompt(FINDING, bundle).user_text == p.user_text


def test_repair_prompt_carries_latest_only(bundle):
    p = build_generation_prompt(FINDING, bundle, (PoCDraft("contract DRAFT1 {}"), Diagnostics("compile", False, "LOG1")),
                                attempt=2)
    assert p.stage == "gre-repair" and p.attempt == 2
    assert "contract DRAFT1 {}" in p.user_text and "LOG1" in p.user_text
    assert p.user_text.index(GENERATION_SECTIONS[3]) < p.user_text.index(PREVIOUS_DRAFT_HEADING)


# --- loop --------------------------------------------------------------------------------

def llm_for(*texts):
    recs = [{"stage": "gre-generate", "text": texts[0]}]
    recs += [{"stage": "gre-repair", "attempt": i, "text": t} for i, t in enumerate(texts[1:], 1)]
    return gateway(recs)


def draft(tag):
    return f"```solidity\n{CLEAN.replace('testExploit', 'test' + tag)}```"


def test_first_try_success(bundle, ws, tmp_path):
    llm = llm_for(draft("A"))
    ex = FakeExecutor({"E": [FakeRun()]})
    r = run_engine(FINDING, bundle, ws, EngineConfig(), llm, ex, tmp_path / "att")
    assert r.success and r.attempts_used == 1 and r.draft.attempt_index == 0
    assert ex.history == [("E", "compile"), ("E", "test")]
    assert llm.ledger.totals("E").calls == 1
    assert "testA" in ws.test_path.read_text()
    assert (tmp_path / "att" / "0" / "diagnostics.txt").read_text() == "[ok]\n"


def test_compile_failure_then_repair(bundle, ws, tmp_path):
    llm = llm_for(draft("A"), draft("B"))
    ex = FakeExecutor({"E": [FakeRun(ok_c=False, compile_output="Error: bad thing"), FakeRun()]})
    r = run_engine(FINDING, bundle, ws, EngineConfig(), llm, ex, tmp_path / "att")
    assert r.success and r.attempts_used == 2 and r.draft.attempt_index == 1
    assert llm.ledger.calls("E", "gre-generate") == 1 and llm.ledger.calls("E", "gre-repair") == 1
    prompt1 = llm.backend.calls[1].user_text
    assert "testA" in prompt1 and "Error: bad thing" in prompt1
    assert "bad thing" in (tmp_path / "att" / "0" / "diagnostics.txt").read_text()


def test_runtime_failure_carries_runtime_log(bundle, ws):
    llm = llm_for(draft("A"), draft("B"))
    ex = FakeExecutor({"E": [FakeRun(ok_r=False, runtime_output="[FAIL: revert: nope] testA() (gas: 1)"), FakeRun()]})
    r = run_engine(FINDING, bundle, ws, EngineConfig(), llm, ex)
    assert r.success and [h.diagnostics.phase for h in r.history[:1]] == ["runtime"]
    assert "revert: nope" in llm.backend.calls[1].user_text


def test_budget_exhaustion(bundle, ws):
    llm = gateway([{"stage": "gre-generate", "text": draft("A")}, {"stage": "gre-repair", "text": draft("B")}])
    ex = FakeExecutor({"E": [FakeRun(ok_c=False, repeat=True)]})
    r = run_engine(FINDING, bundle, ws, EngineConfig(retry_budget=3), llm, ex)
    assert not r.success and r.attempts_used == 3 and len(r.history) == 3
    assert llm.ledger.totals("E").calls == 3 and r.last_diagnostics.phase == "compile"


def test_sanitize_error_consumes_attempt(bundle, ws):
    llm = llm_for("I cannot help with that.", draft("B"))
    ex = FakeExecutor({"E": [FakeRun()]})
    r = run_engine(FINDING, bundle, ws, EngineConfig(), llm, ex)
    assert r.success and r.attempts_used == 2
    assert r.history[0].diagnostics.phase == "sanitize"
    assert ex.history == [("E", "compile"), ("E", "test")]
    assert "sanitizer rejected draft" in llm.backend.calls[1].user_text


def test_gateway_error_propagates(bundle, ws):
    with pytest.raises(GatewayError):
        run_engine(FINDING, bundle, ws, EngineConfig(), gateway([]), FakeExecutor())


def test_budget_must_be_positive():
    with pytest.raises(ValueError):
        EngineConfig(retry_budget=0)
