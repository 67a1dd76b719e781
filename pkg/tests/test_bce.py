import json

import pytest
from hypothesis import given, settings, strategies as st

from pocval.bce import (
    SemanticLink, assemble_bundle, expand_structural, extract_bug_context, identify_key_functions,
    infer_semantic_links, select_candidates, token_count,
)
from pocval.errors import MetadataError, StageError
from pocval.findings import Finding
from pocval.llm import LlmGateway
from pocval.solidity import CallGraph, parse_project, parse_sources

from conftest import FIXTURES, PROJECTS, gateway


def F(fid="F", locs=(), narrative="n") -> Finding:
    return Finding(fid, "t", "", narrative, "High", tuple(locs))


def reply(stage, text, fid="F"):
    return {"finding": fid, "stage": stage, "text": text}


@pytest.fixture(scope="module")
def wallet():
    return parse_project(PROJECTS / "wallet_vuln")


@pytest.fixture(scope="module")
def nft():
    return parse_project(PROJECTS / "nft_fixed")


def test_keys_from_narrative(wallet):
    llm = gateway([reply("bce-keys", '["withdraw"]')])
    keys = identify_key_functions(F(narrative="Any sender can withdraw Ether from the contract account"), wallet, llm)
    assert keys == ["Wallet.withdraw"]


def test_keys_drop_unknown_symbols(wallet):
    llm = gateway([reply("bce-keys", '["foo"]')])
    assert identify_key_functions(F(), wallet, llm) == []


def test_keys_mint_and_burn_retained(nft):
    llm = gateway([reply("bce-keys", 'The relevant functions are:\n```json\n["mint", "burn"]\n```')])
    assert identify_key_functions(F(), nft, llm) == ["Collectible.mint", "Collectible.burn"]


def test_keys_gateway_failure_is_stage_error(nft):
    with pytest.raises(StageError) as ei:
        identify_key_functions(F(), nft, gateway([]))
    assert ei.value.stage == "bce"


SETFEE = parse_sources({"Fee.sol": """pragma solidity ^0.8.0;
contract Fee {
    uint256 fee;
    function setFee(uint256 f) external { fee = f; }
    function checkFee(uint256 amount) external view returns (uint256) { return amount * fee; }
    function name() external pure returns (string memory) { return "fee"; }
}
"""})


def test_links_inverse(nft):
    llm = gateway([reply("bce-links", '[{"source": "mint", "target": "burn", "kind": "inverse"}]')])
    cands = select_candidates(["Collectible.mint"], nft)
    links = infer_semantic_links(["Collectible.mint"], cands, llm, nft, "F")
    assert links == [SemanticLink("Collectible.mint", "Collectible.burn", "inverse")]
    prompt = llm.backend.calls[0].user_text
    assert "burn(uint256 id)" in prompt and "ownerOf[id]" not in prompt  # signatures only


def test_links_state_coupled():
    llm = gateway([reply("bce-links", '[{"source": "setFee", "target": "checkFee", "kind": "state-coupled"}]')])
    cands = select_candidates(["Fee.setFee"], SETFEE)
    assert infer_semantic_links(["Fee.setFee"], cands, llm, SETFEE, "F") == [
        SemanticLink("Fee.setFee", "Fee.checkFee", "state-coupled")]


@pytest.mark.parametrize("text", ["[]", "no idea", '[{"source": "setFee", "target": "ghost", "kind": "inverse"}]',
                                  '[{"source": "setFee", "target": "name", "kind": "sibling"}]'])
def test_links_empty_or_unparseable(text):
    llm = gateway([reply("bce-links", text)])
    assert infer_semantic_links(["Fee.setFee"], select_candidates(["Fee.setFee"], SETFEE), llm, SETFEE, "F") == []


def test_candidate_cap_prefers_name_overlap():
    fns = "\n".join(f"    function other{i}() external {{}}" for i in range(80))
    m = parse_sources({"Big.sol": "pragma solidity ^0.8.0;\ncontract Big {\n    function setFee() external {}\n"
                       "    function feeOf() external {}\n" + fns + "\n}\n"})
    cands = select_candidates(["Big.setFee"], m, cap=64)
    assert len(cands) == 64
    assert cands[0].qualified_name == "Big.feeOf"
    assert "Big.setFee" not in [c.qualified_name for c in cands]


# --- structural expansion -------------------------------------------------------

def G(edges, mods=None, extra=()):
    nodes = {n for e in edges for n in e} | set(extra) | {m for ms in (mods or {}).values() for m in ms}
    return CallGraph(sorted(nodes), list(edges), {k: tuple(v) for k, v in (mods or {}).items()})


def test_underscore_chain():
    g = G([("transfer", "_transfer"), ("_transfer", "_beforeTokenTransfer")])
    assert expand_structural(["transfer"], g) == {"transfer": 0, "_transfer": 1, "_beforeTokenTransfer": 2}


def test_isolated_seed():
    assert expand_structural(["f"], G([], extra=["f"])) == {"f": 0}
    assert expand_structural(["f"], G([], {"f": ["onlyOwner"]}, extra=["f"])) == {"f": 0, "onlyOwner": 0}


def test_one_hop_both_directions_and_terminal():
    g = G([("caller", "seed"), ("seed", "helper"), ("helper", "deeper"), ("seed", "_a"), ("_a", "_b"),
           ("_b", "impl"), ("impl", "beyond"), ("caller", "_c"), ("callerOfCaller", "caller")])
    got = expand_structural(["seed"], g)
    # helper is a non-underscored hop-1 callee: its non-underscored callee is not pulled in
    assert got == {"seed": 0, "_a": 1, "caller": 1, "helper": 1, "_b": 2, "_c": 2, "impl": 3}
    assert list(got) == sorted(got, key=lambda n: (got[n], n))


def test_modifier_closure_distance():
    g = G([("seed", "_inner")], {"_inner": ["onlyRole"], "seed": ["whenNotPaused"]})
    assert expand_structural(["seed"], g) == {"seed": 0, "whenNotPaused": 0, "_inner": 1, "onlyRole": 1}


_names = ["a", "b", "c", "_d", "_e", "_f", "g", "_h"]


@st.composite
def graphs(draw):
    edges = draw(st.lists(st.tuples(st.sampled_from(_names), st.sampled_from(_names)), max_size=20))
    mods = draw(st.dictionaries(st.sampled_from(_names), st.lists(st.sampled_from(["m1", "m2"]), max_size=2)))
    return G(edges, mods, extra=_names)


@settings(max_examples=150, deadline=None)
@given(g=graphs(), s1=st.sets(st.sampled_from(_names)), s2=st.sets(st.sampled_from(_names)))
def test_expansion_is_monotone(g, s1, s2):
    small = set(expand_structural(sorted(s1), g))
    large = set(expand_structural(sorted(s1 | s2), g))
    assert small <= large


@settings(max_examples=100, deadline=None)
@given(g=graphs(), seeds=st.sets(st.sampled_from(_names), min_size=1))
def test_expansion_modifier_closure(g, seeds):
    got = expand_structural(sorted(seeds), g)
    for n in got:
        assert set(g.modifiers_of(n)) <= set(got)


# --- bundle -------------------------------------------------------------------

TWO_CTORS = {"AB.sol": """pragma solidity ^0.8.4;
contract A {
    uint256 public x;
    constructor() { x = 1; }
    function bump() public { x += 1; }
}
contract B {
    A public a;
    constructor(A a_) { a = a_; }
    function poke() external { a.bump(); }
    function initialize() external {}
}
"""}


def test_constructors_of_every_touched_contract():
    m = parse_sources(TWO_CTORS)
    b = assemble_bundle(F(), m, {"B.poke": 0, "A.bump": 1}, [])
    assert set(b.constructors_and_initializers) == {"A.constructor", "B.constructor", "B.initialize"}
    assert b.build_metadata.compiler_version == "0.8.4"
    assert b.target_contracts == ["B"]


def test_constructorless_slice(wallet):
    b = assemble_bundle(F(), wallet, {"Wallet.withdraw": 0, "Wallet._withdraw": 1}, [])
    assert b.constructors_and_initializers == []
    assert b.build_metadata.pragma == "^0.7.6"
    assert b.build_metadata.target_files == ("src/Wallet.sol",)


def test_missing_pragma_is_metadata_error():
    m = parse_sources({"X.sol": "contract X { function f() public {} }\n"})
    with pytest.raises(MetadataError):
        assemble_bundle(F(), m, {"X.f": 0}, [])


def test_empty_slice_rejected(wallet):
    with pytest.raises(StageError):
        assemble_bundle(F(), wallet, {}, [])


def test_full_extraction_golden(golden_llm):
    m = parse_project(PROJECTS / "nft_fixed")
    f = Finding("nft-fixed", "slither", "nft_fixed", "x", "High", ("mint",))
    b = extract_bug_context(f, m, golden_llm)
    assert b.key_functions == ["Collectible.mint"]
    assert b.slice == ["Collectible.burn", "Collectible.mint", "Ownable.onlyOwner", "Collectible._burn",
                       "Collectible._mint"]
    assert b.constructors_and_initializers == ["Ownable.constructor"]
    for name in [*b.slice, *b.constructors_and_initializers]:
        assert b.assembled_text.count(f"// ==== {name} (") == 1
    assert "function transferOwnership" not in b.assembled_text
    assert b.assembled_text.index("// ==== Collectible.burn") < b.assembled_text.index("// ==== Collectible._burn")
    manifest = json.loads(json.dumps(b.manifest()))
    assert manifest["slice"][0] == {"name": "Collectible.burn", "distance": 0}
    assert "Collectible.ownerOf(uint256) returns (address)" in manifest["public_abi"]


def test_bundle_smaller_than_flattened_project():
    m = parse_project(FIXTURES / "parser")
    llm = gateway([reply("bce-keys", '["emitEvent"]'), reply("bce-links", "[]")])
    b = extract_bug_context(F(locs=["emitEvent"]), m, llm)
    assert set(b.slice) == {"Vault.emitEvent", "Vault._withdraw"}
    assert token_count(b.assembled_text) < token_count(m.flattened_text())


def test_bundle_export(tmp_path, golden_llm):
    m = parse_project(PROJECTS / "priv_vuln")
    f = Finding("priv-vuln", "t", "priv_vuln", "x", "High", ("grantAdmin",))
    b = extract_bug_context(f, m, golden_llm)
    b.export(tmp_path)
    assert (tmp_path / "context.sol.txt").read_text() == b.assembled_text
    data = json.loads((tmp_path / "manifest.json").read_text())
    assert data["key_functions"] == ["Treasury.grantAdmin", "Treasury.setTreasury"]
    assert {"source": "Treasury.grantAdmin", "target": "Treasury.revokeAdmin", "kind": "inverse"} in data["semantic_links"]
