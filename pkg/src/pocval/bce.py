"""Bug-context extraction.

Turns a finding into a compact slice of the project: key functions named by
the report, semantically linked counterparts (inverse or state-coupled
operations), a one-hop structural expansion on the call graph with
underscore-internal recursion, and every modifier those functions use.
"""

from __future__ import annotations

import json
import logging
import re
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from . import prompts
from .errors import GatewayError, MetadataError, StageError
from .findings import Finding
from .llm import LlmGateway, PromptPayload, extract_code_block
from .solidity import CallableDescriptor, CallGraph, FunctionDef, SourceModel, public_abi

log = logging.getLogger(__name__)

LINK_KINDS = ("inverse", "state-coupled")
DEFAULT_CANDIDATE_CAP = 64


@dataclass(frozen=True)
class SemanticLink:
    source: str
    target: str
    kind: str


@dataclass(frozen=True)
class BuildMetadata:
    compiler_version: str
    pragma: str
    remappings: tuple[str, ...] = ()
    target_files: tuple[str, ...] = ()


@dataclass
class BugContextBundle:
    finding_id: str
    key_functions: list[str]
    semantic_links: list[SemanticLink]
    slice: list[str]
    distances: dict[str, int]
    constructors_and_initializers: list[str]
    build_metadata: BuildMetadata
    public_abi: list[CallableDescriptor]
    assembled_text: str
    target_contracts: list[str] = field(default_factory=list)
    catalog_signatures: list[tuple[str, tuple[str, ...]]] = field(default_factory=list)
    project_contracts: list[str] = field(default_factory=list)

    def manifest(self) -> dict:
        return {
            "finding_id": self.finding_id,
            "key_functions": self.key_functions,
            "semantic_links": [vars(link) for link in self.semantic_links],
            "slice": [{"name": n, "distance": self.distances.get(n, 0)} for n in self.slice],
            "constructors_and_initializers": self.constructors_and_initializers,
            "build_metadata": {
                "compiler_version": self.build_metadata.compiler_version,
                "pragma": self.build_metadata.pragma,
                "remappings": list(self.build_metadata.remappings),
                "target_files": list(self.build_metadata.target_files),
            },
            "target_contracts": self.target_contracts,
            "public_abi": [str(d) for d in self.public_abi],
        }

    def export(self, directory: Path | str) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "context.sol.txt").write_text(self.assembled_text, encoding="utf-8")
        (directory / "manifest.json").write_text(json.dumps(self.manifest(), indent=2), encoding="utf-8")


# ----------------------------------------------------------------------------
# Key functions


def _parse_name_list(text: str) -> list[str]:
    body = extract_code_block(text) if "```" in text else text
    try:
        data = json.loads(body)
        if isinstance(data, dict):
            data = data.get("functions") or data.get("key_functions") or []
        if isinstance(data, list):
            return [str(x).strip() for x in data if str(x).strip()]
    except json.JSONDecodeError:
        pass
    return re.findall(r"[A-Za-z_$][\w$]*(?:\.[A-Za-z_$][\w$]*)?", body)


def _resolve_names(names: Iterable[str], model: SourceModel) -> list[str]:
    out: list[str] = []
    for name in names:
        for fn in model.lookup(name):
            if fn.qualified_name not in out:
                out.append(fn.qualified_name)
    return out


def identify_key_functions(f: Finding, model: SourceModel, llm: LlmGateway) -> list[str]:
    """Key functions named by the report, filtered against the catalog.

    The finding's own locations are always candidates; the LLM may add more.
    Names that are not in the catalog are discarded.
    """
    catalog = sorted(model.simple_names())
    payload = PromptPayload(
        system_text=prompts.KEYS_SYSTEM,
        user_text=prompts.keys_user(f, catalog),
        stage="bce-keys",
        finding_id=f.id,
    )
    try:
        reply = llm.complete(payload)
    except GatewayError as exc:
        raise StageError("bce", str(exc)) from exc
    proposed = _parse_name_list(reply.text)
    dropped = [n for n in proposed if not model.lookup(n)]
    if dropped:
        log.info("finding %s: discarded non-existent symbols %s", f.id, dropped)
    return _resolve_names([*f.function_names, *proposed], model)


# ----------------------------------------------------------------------------
# Semantic links


def _name_tokens(name: str) -> set[str]:
    parts = re.findall(r"[A-Z]?[a-z0-9]+|[A-Z]+(?![a-z])", name.strip("_"))
    return {p.lower() for p in parts}


def select_candidates(keys: list[str], model: SourceModel, cap: int = DEFAULT_CANDIDATE_CAP) -> list[FunctionDef]:
    """Catalog functions other than the keys, nearest by name-token overlap first."""
    key_tokens: set[str] = set()
    key_contracts = set()
    for k in keys:
        fn = model.functions[k]
        key_tokens |= _name_tokens(fn.simple_name)
        key_contracts.add(fn.contract)
    pool = [
        fn for q, fn in model.functions.items()
        if q not in keys and fn.kind == "function"
    ]
    pool.sort(key=lambda fn: (
        -len(_name_tokens(fn.simple_name) & key_tokens),
        fn.contract not in key_contracts,
        fn.qualified_name,
    ))
    return pool[:cap]


def _parse_links(text: str) -> list[tuple[str, str, str]]:
    body = extract_code_block(text) if "```" in text else text
    data = json.loads(body)
    if isinstance(data, dict):
        data = data.get("links", [])
    if not isinstance(data, list):
        raise ValueError("links reply is not a list")
    out = []
    for item in data:
        if isinstance(item, dict):
            out.append((str(item["source"]), str(item["target"]), str(item["kind"])))
        elif isinstance(item, (list, tuple)) and len(item) == 3:
            out.append((str(item[0]), str(item[1]), str(item[2])))
        else:
            raise ValueError(f"bad link entry {item!r}")
    return out


def infer_semantic_links(keys: list[str], candidates: list[FunctionDef], llm: LlmGateway,
                         model: SourceModel, finding_id: str = "") -> list[SemanticLink]:
    """Ask for inverse / state-coupled counterparts among ``candidates``.

    Only names and parameter lists are shown. Replies that do not parse give
    an empty link set.
    """
    if not keys or not candidates:
        return []
    key_sigs = [model.functions[k].display_signature() for k in keys]
    cand_sigs = [fn.display_signature() for fn in candidates]
    payload = PromptPayload(
        system_text=prompts.LINKS_SYSTEM,
        user_text=prompts.links_user(key_sigs, cand_sigs),
        stage="bce-links",
        finding_id=finding_id,
    )
    try:
        reply = llm.complete(payload)
    except GatewayError as exc:
        raise StageError("bce", str(exc)) from exc
    try:
        raw = _parse_links(reply.text)
    except (ValueError, KeyError, TypeError) as exc:
        log.warning("finding %s: unparseable semantic-link reply (%s); using no links", finding_id, exc)
        return []

    by_simple: dict[str, list[str]] = {}
    for fn in candidates:
        by_simple.setdefault(fn.simple_name, []).append(fn.qualified_name)
        by_simple.setdefault(fn.qualified_name, []).append(fn.qualified_name)
    key_by_simple: dict[str, list[str]] = {}
    for k in keys:
        key_by_simple.setdefault(model.functions[k].simple_name, []).append(k)
        key_by_simple.setdefault(k, []).append(k)

    links: list[SemanticLink] = []
    for src, dst, kind in raw:
        kind = kind.strip().lower().replace("_", "-").replace(" ", "-")
        if kind not in LINK_KINDS:
            log.info("dropping link %s -> %s with unknown kind %r", src, dst, kind)
            continue
        srcs = key_by_simple.get(src.split("(")[0].strip(), [])
        dsts = by_simple.get(dst.split("(")[0].strip(), [])
        for s in srcs:
            for d in dsts:
                link = SemanticLink(s, d, kind)
                if link not in links:
                    links.append(link)
    return links


# ----------------------------------------------------------------------------
# Structural expansion


def _underscored(name: str) -> bool:
    return name.rsplit(".", 1)[-1].startswith("_")


def expand_structural(seeds: Iterable[str], graph: CallGraph) -> dict[str, int]:
    """One-hop expansion plus underscore-internal recursion and modifier closure.

    Returns every included function or modifier mapped to its hop distance,
    ordered by (distance, name). Seeds are at distance 0, direct callers and
    callees at 1. From those, callee edges are followed into underscore-
    prefixed functions recursively; a non-underscored callee of an
    underscored function is included as a terminal and not expanded further.
    Modifiers sit at the distance of the first function that uses them.
    """
    seeds = list(dict.fromkeys(seeds))
    dist: dict[str, int] = {s: 0 for s in seeds}
    for s in seeds:
        for n in (*graph.callees(s), *graph.callers(s)):
            dist.setdefault(n, 1)

    queue = deque(sorted(dist, key=lambda n: (dist[n], n)))
    while queue:
        node = queue.popleft()
        for c in graph.callees(node):
            if c in dist:
                continue
            if _underscored(c):
                dist[c] = dist[node] + 1
                queue.append(c)
            elif _underscored(node):
                dist[c] = dist[node] + 1  # terminal implementation

    for fn in sorted(list(dist), key=lambda n: (dist[n], n)):
        for m in graph.modifiers_of(fn):
            if m not in dist or dist[m] > dist[fn]:
                dist[m] = dist[fn]
    return dict(sorted(dist.items(), key=lambda kv: (kv[1], kv[0])))


# ----------------------------------------------------------------------------
# Bundle


def _definition(model: SourceModel, name: str):
    return model.functions.get(name) or model.modifiers[name]


def _header(model: SourceModel, name: str) -> str:
    d = _definition(model, name)
    span = d.source_span
    return f"// ==== {name} ({span.file}:{span.start_line}-{span.end_line})"


def assemble_bundle(f: Finding, model: SourceModel, slice_: dict[str, int] | Iterable[str],
                    links: list[SemanticLink], key_functions: list[str] | None = None) -> BugContextBundle:
    if not isinstance(slice_, dict):
        slice_ = {n: 0 for n in slice_}
    if not slice_:
        raise StageError("bce", "empty slice")
    ordered = sorted(slice_, key=lambda n: (slice_[n], n))
    keys = list(key_functions if key_functions is not None else [n for n in ordered if slice_[n] == 0])

    defining = []
    for n in ordered:
        c = _definition(model, n).contract
        if c not in defining:
            defining.append(c)

    inits = []
    for c in defining:
        for q in model.contracts[c].functions:
            if model.functions[q].is_constructor_or_initializer and q not in inits:
                inits.append(q)

    target_contracts = []
    for k in keys or ordered[:1]:
        c = _definition(model, k).contract
        if c not in target_contracts:
            target_contracts.append(c)
    target_files = tuple(dict.fromkeys(model.contracts[c].file for c in target_contracts))

    files_in_slice = {model.contracts[c].file for c in defining}
    version = model.compiler_version(sorted(files_in_slice))
    if version is None:
        raise MetadataError("no pragma solidity in any project file; compiler version unresolvable")
    pragma = model.pragma_for(target_files[0]) if target_files else None
    metadata = BuildMetadata(
        compiler_version=version,
        pragma=pragma or version,
        remappings=tuple(model.remappings),
        target_files=target_files,
    )

    abi_contracts = set(defining)
    changed = True
    while changed:
        changed = False
        for name, c in model.contracts.items():
            if name not in abi_contracts and any(b in abi_contracts for b in c.bases):
                abi_contracts.add(name)
                changed = True

    parts = [f"// Build: solc {metadata.compiler_version} (pragma solidity {metadata.pragma})"]
    if metadata.remappings:
        parts.append("// Remappings: " + ", ".join(metadata.remappings))
    parts.append("")
    for c in defining:
        cd = model.contracts[c]
        head = f"{'abstract contract' if cd.kind == 'abstract' else cd.kind} {c}"
        if cd.bases:
            head += " is " + ", ".join(cd.bases)
        parts.append(f"// ---- {head} ({cd.file})")
        parts.extend(f"//   {v.declaration}" for v in cd.state_vars)
    parts.append("")
    emitted = set()
    for name in [*ordered, *inits]:
        if name in emitted:
            continue
        emitted.add(name)
        parts.append(_header(model, name))
        parts.append(_definition(model, name).body_text)
        parts.append("")

    catalog_sigs = [
        (fn.simple_name, fn.param_types)
        for c in target_contracts
        for c2 in model.contracts[c].linearization
        for q in model.contracts[c2].functions
        for fn in [model.functions[q]]
        if fn.kind == "function"
    ]
    return BugContextBundle(
        finding_id=f.id,
        key_functions=keys,
        semantic_links=list(links),
        slice=ordered,
        distances=dict(slice_),
        constructors_and_initializers=inits,
        build_metadata=metadata,
        public_abi=public_abi(model, abi_contracts),
        assembled_text="\n".join(parts),
        target_contracts=target_contracts,
        catalog_signatures=list(dict.fromkeys(catalog_sigs)),
        project_contracts=list(model.contracts),
    )


def extract_bug_context(f: Finding, model: SourceModel, llm: LlmGateway,
                        candidate_cap: int = DEFAULT_CANDIDATE_CAP) -> BugContextBundle:
    """Full extraction: keys, semantic links, structural expansion, bundle."""
    keys = identify_key_functions(f, model, llm)
    if not keys:
        raise StageError("bce", "no key function of the report exists in the project")
    candidates = select_candidates(keys, model, candidate_cap)
    links = infer_semantic_links(keys, candidates, llm, model, finding_id=f.id)
    seeds = list(dict.fromkeys([*keys, *(link.target for link in links)]))
    expanded = expand_structural(seeds, model.call_graph)
    return assemble_bundle(f, model, expanded, links, key_functions=keys)


def token_count(text: str) -> int:
    return len(text.split())
