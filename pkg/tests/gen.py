"""Hypothesis generators shared by the engine tests and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

from hypothesis import strategies as st

from pocval.bce import assemble_bundle
from pocval.findings import Finding
from pocval.solidity import parse_sources

VERSIONS = ["0.6.12", "0.7.6", "0.8.0", "0.8.19"]
TYPES = ["uint256", "address", "bool", "bytes32"]
NAMES = ["transfer", "mint", "burn", "approve", "setOwner", "withdraw"]


@dataclass
class Case:
    bundle: object
    draft: str
    conflicting: list[str]  # function source blocks that must disappear
    keep: list[str]  # function source blocks that must survive byte-for-byte


def _fn(name, types, body):
    params = ", ".join(f"{t} a{i}" for i, t in enumerate(types))
    return f"    function {name}({params}) public {{\n        {body}\n    }}\n"


@st.composite
def sanitizer_cases(draw, versions=VERSIONS, force_conflict=False) -> Case:
    version = draw(st.sampled_from(versions))
    pragma = draw(st.sampled_from([f"^{version}", f">={version} <0.9.0", version]))
    sigs = draw(st.lists(st.tuples(st.sampled_from(NAMES), st.lists(st.sampled_from(TYPES), max_size=2).map(tuple)),
                         min_size=1, max_size=4, unique_by=lambda s: s[0]))
    target = f"pragma solidity {pragma};\ncontract Target {{\n" + "".join(
        _fn(n, t, "return;") for n, t in sigs) + "}\n"
    model = parse_sources({"src/Target.sol": target})
    bundle = assemble_bundle(Finding("S", "t", "", "n", "High"), model, list(model.functions), [])

    conflicting, keep = [], []
    blocks = []
    for i, (n, t) in enumerate(sigs):
        if (force_conflict and i == 0) or draw(st.booleans()):
            blk = _fn(n, t, f"uint256 dup{i} = {i};")
            conflicting.append(blk)
            blocks.append(blk)
    for j in range(draw(st.integers(0, 3))):
        if draw(st.booleans()):
            n, t = draw(st.sampled_from(sigs))
            t = t + ("string memory",)  # same name, different parameter list: an overload, not a conflict
        else:
            n, t = f"helper{j}", draw(st.lists(st.sampled_from(TYPES), max_size=2))
        blk = _fn(n, t, f"uint256 keep{j} = {j};")
        keep.append(blk)
        blocks.append(blk)
    blocks = draw(st.permutations(blocks))
    test_fn = "    function testExploit() public {\n        target.%s();\n    }\n" % sigs[0][0]
    keep.append(test_fn)

    header = draw(st.sampled_from(["", "pragma solidity ^0.8.0;\n", f"pragma solidity {pragma};\n",
                                   "// SPDX-License-Identifier: MIT\npragma solidity >=0.4.0;\n"]))
    imports = draw(st.sampled_from(['', 'import "forge-std/Test.sol";\n', 'import "src/Target.sol";\n',
                                    'import "forge-std/Test.sol";\nimport "../src/Target.sol";\n']))
    redefine = draw(st.booleans())
    parts = [header, imports, "\n"]
    if redefine:
        parts.append("contract Target {\n    function x() public {}\n}\n\n")
    parts.append("contract PoCTest {\n    Target target;\n" + "".join(blocks) + test_fn + "}\n")
    return Case(bundle, "".join(parts), conflicting, keep)
