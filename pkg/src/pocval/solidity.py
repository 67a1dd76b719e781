"""Lightweight Solidity source model.

Extracts contracts, functions, modifiers, public state variables and pragma
information from ``.sol`` files, and builds an intra-project call graph.
This is a structural scanner, not a type checker: comments and string
literals are masked out, members are split on balanced braces, and call
sites are recognised as ``identifier(`` inside function bodies.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import EmptyProjectError, SolidityParseError

log = logging.getLogger(__name__)

IDENT = r"[A-Za-z_$][\w$]*"
_IDENT_RE = re.compile(IDENT)
_VERSION_RE = re.compile(r"(\d+)\.(\d+)(?:\.(\d+))?")

VISIBILITIES = ("public", "external", "internal", "private")
STORAGE_LOCATIONS = {"memory", "storage", "calldata"}
_HEADER_KEYWORDS = {
    *VISIBILITIES,
    "view", "pure", "payable", "constant", "virtual", "override", "returns",
    "nonpayable",
}
_CALL_SKIP = {
    "if", "for", "while", "do", "require", "assert", "revert", "return",
    "returns", "emit", "new", "function", "catch", "try", "mapping",
    "assembly", "unchecked", "type", "payable", "address", "bool", "string",
    "bytes", "keccak256", "sha256", "ecrecover", "abi", "selfdestruct",
    "delete", "modifier", "event", "error",
}
_SKIPPED_DIRS = {"lib", "node_modules", "out", "cache", ".git", "broadcast", "test", "script"}
_ELEMENTARY_RE = re.compile(
    r"^(address(\s+payable)?|bool|string|bytes\d*|u?int\d*|u?fixed[\dx]*)$"
)


# ----------------------------------------------------------------------------
# Data model


@dataclass(frozen=True)
class SourceSpan:
    file: str
    start_line: int
    end_line: int
    start: int  # character offsets into the file text
    end: int


@dataclass(frozen=True)
class Parameter:
    name: str
    type: str


@dataclass(frozen=True)
class FunctionDef:
    qualified_name: str
    contract: str
    simple_name: str
    visibility: str
    parameters: tuple[Parameter, ...]
    modifiers: tuple[str, ...]
    source_span: SourceSpan
    body_text: str
    is_constructor_or_initializer: bool = False
    state_mutability: str = ""
    returns: str = ""
    kind: str = "function"  # function | constructor | fallback | receive

    @property
    def is_underscored(self) -> bool:
        return self.simple_name.startswith("_")

    @property
    def param_types(self) -> tuple[str, ...]:
        return tuple(canonical_type(p.type) for p in self.parameters)

    @property
    def signature(self) -> str:
        return f"{self.simple_name}({','.join(self.param_types)})"

    def display_signature(self) -> str:
        params = ", ".join(f"{p.type} {p.name}".strip() for p in self.parameters)
        return f"{self.simple_name}({params})"


@dataclass(frozen=True)
class ModifierDef:
    qualified_name: str
    contract: str
    simple_name: str
    body_text: str
    source_span: SourceSpan


@dataclass(frozen=True)
class StateVariable:
    name: str
    type: str
    visibility: str
    contract: str
    declaration: str
    constant: bool = False


@dataclass
class ContractDef:
    name: str
    kind: str  # contract | abstract | interface | library
    bases: list[str]
    file: str
    span: SourceSpan
    functions: list[str] = field(default_factory=list)
    modifiers: list[str] = field(default_factory=list)
    state_vars: list[StateVariable] = field(default_factory=list)
    using: list[str] = field(default_factory=list)
    enums: list[str] = field(default_factory=list)
    structs: list[str] = field(default_factory=list)
    linearization: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class SourceFile:
    path: str
    text: str
    pragma: str | None  # raw constraint, e.g. "^0.8.0"
    abicoder_v2: bool

    @property
    def compiler_version(self) -> str | None:
        return pragma_version(self.pragma) if self.pragma else None


@dataclass(frozen=True)
class CallableDescriptor:
    contract: str
    name: str
    param_types: tuple[str, ...]
    returns: str
    kind: str  # function | getter
    state_mutability: str = ""

    @property
    def ref(self) -> str:
        return f"{self.contract}.{self.name}({','.join(self.param_types)})"

    def __str__(self) -> str:
        out = f" returns ({self.returns})" if self.returns else ""
        return f"{self.ref}{out}"


@dataclass
class CallGraph:
    """Directed call graph over qualified names.

    ``modifier_refs`` maps a function to the modifier definitions it uses.
    Modifier uses are not call edges.
    """

    nodes: list[str]
    edges: list[tuple[str, str]]
    modifier_refs: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        node_set = set(self.nodes)
        for a, b in self.edges:
            if a not in node_set or b not in node_set:
                raise ValueError(f"edge {a}->{b} has an endpoint outside the node set")
        self.nodes = sorted(node_set)
        self.edges = sorted(set(self.edges))
        self._callees: dict[str, list[str]] = {n: [] for n in self.nodes}
        self._callers: dict[str, list[str]] = {n: [] for n in self.nodes}
        for a, b in self.edges:
            self._callees[a].append(b)
            self._callers[b].append(a)

    def callees(self, node: str) -> list[str]:
        return self._callees.get(node, [])

    def callers(self, node: str) -> list[str]:
        return self._callers.get(node, [])

    def modifiers_of(self, node: str) -> tuple[str, ...]:
        return self.modifier_refs.get(node, ())


@dataclass
class SourceModel:
    root: Path
    files: dict[str, SourceFile]
    contracts: dict[str, ContractDef]
    functions: dict[str, FunctionDef]
    modifiers: dict[str, ModifierDef]
    call_graph: CallGraph
    remappings: list[str]

    def lookup(self, name: str) -> list[FunctionDef]:
        """Resolve a simple, qualified, or signature-qualified name."""
        if name in self.functions:
            return [self.functions[name]]
        if "." in name:
            contract, _, rest = name.partition(".")
            simple = rest.split("(", 1)[0]
            return [
                fn for fn in self.functions.values()
                if fn.contract == contract and fn.simple_name == simple
            ]
        simple = name.split("(", 1)[0]
        return [fn for fn in self.functions.values() if fn.simple_name == simple]

    def simple_names(self) -> set[str]:
        return {fn.simple_name for fn in self.functions.values()}

    def file_of(self, qualified_name: str) -> str:
        if qualified_name in self.functions:
            return self.functions[qualified_name].source_span.file
        return self.modifiers[qualified_name].source_span.file

    def compiler_version(self, files: Iterable[str] | None = None) -> str | None:
        """Highest concrete version implied by the pragmas of ``files``."""
        chosen = [self.files[f] for f in files] if files is not None else list(self.files.values())
        versions = [sf.compiler_version for sf in chosen if sf.compiler_version]
        if not versions and files is not None:
            versions = [sf.compiler_version for sf in self.files.values() if sf.compiler_version]
        if not versions:
            return None
        return max(versions, key=version_tuple)

    def pragma_for(self, file: str) -> str | None:
        sf = self.files.get(file)
        if sf and sf.pragma:
            return sf.pragma
        for other in self.files.values():
            if other.pragma:
                return other.pragma
        return None

    def flattened_text(self) -> str:
        return "\n".join(self.files[p].text for p in sorted(self.files))


# ----------------------------------------------------------------------------
# Small helpers


def version_tuple(version: str) -> tuple[int, int, int]:
    m = _VERSION_RE.search(version)
    if not m:
        return (0, 0, 0)
    return (int(m.group(1)), int(m.group(2)), int(m.group(3) or 0))


def pragma_version(constraint: str) -> str | None:
    """Concrete compiler version for a pragma constraint (its first bound)."""
    m = _VERSION_RE.search(constraint)
    if not m:
        return None
    return f"{m.group(1)}.{m.group(2)}.{m.group(3) or 0}"


def is_legacy_compiler(version: str | None) -> bool:
    return version is not None and version_tuple(version) < (0, 8, 0)


def canonical_type(type_text: str) -> str:
    """Normalise a type for signature comparison (uint -> uint256, no locations)."""
    t = re.sub(r"\s+", " ", type_text).strip()
    words = [w for w in t.split(" ") if w not in STORAGE_LOCATIONS]
    t = " ".join(words)
    t = re.sub(r"\baddress payable\b", "address", t)
    t = re.sub(r"\buint\b", "uint256", t)
    t = re.sub(r"\bint\b", "int256", t)
    t = re.sub(r"\bbyte\b", "bytes1", t)
    t = re.sub(r"\s*([\[\]()=>,])\s*", r"\1", t)
    return t


def mask_source(text: str) -> str:
    """Blank out comments and string-literal contents, preserving offsets."""
    out = list(text)
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        nxt = text[i + 1] if i + 1 < n else ""
        if c == "/" and nxt == "/":
            j = text.find("\n", i)
            j = n if j == -1 else j
            for k in range(i, j):
                out[k] = " "
            i = j
        elif c == "/" and nxt == "*":
            j = text.find("*/", i + 2)
            j = n if j == -1 else j + 2
            for k in range(i, j):
                if out[k] != "\n":
                    out[k] = " "
            i = j
        elif c in "\"'":
            j = i + 1
            while j < n and text[j] != c and text[j] != "\n":
                j += 2 if text[j] == "\\" else 1
            for k in range(i + 1, min(j, n)):
                if out[k] != "\n":
                    out[k] = " "
            i = j + 1
        else:
            i += 1
    return "".join(out)


def line_of(text: str, offset: int) -> int:
    return text.count("\n", 0, offset) + 1


def _column_of(text: str, offset: int) -> int:
    return offset - (text.rfind("\n", 0, offset) + 1) + 1


def _match_close(masked: str, open_pos: int, path: str, text: str) -> int:
    """Index of the bracket closing the one at ``open_pos``."""
    pairs = {"{": "}", "(": ")", "[": "]"}
    opener = masked[open_pos]
    closer = pairs[opener]
    depth = 0
    for i in range(open_pos, len(masked)):
        ch = masked[i]
        if ch == opener:
            depth += 1
        elif ch == closer:
            depth -= 1
            if depth == 0:
                return i
    raise SolidityParseError(
        path, line_of(text, open_pos), _column_of(text, open_pos), f"unbalanced {opener!r}"
    )


def split_top_level(s: str, sep: str = ",") -> list[str]:
    parts, depth, cur = [], 0, []
    for ch in s:
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
        if ch == sep and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return [p.strip() for p in parts if p.strip()]


def _skip_ws(s: str, i: int) -> int:
    while i < len(s) and s[i].isspace():
        i += 1
    return i


def split_type(decl: str) -> tuple[str, str]:
    """Split ``decl`` into (type expression, remainder)."""
    s = decl.strip()
    if s.startswith("mapping"):
        p = s.find("(")
        depth = 0
        for i in range(p, len(s)):
            if s[i] == "(":
                depth += 1
            elif s[i] == ")":
                depth -= 1
                if depth == 0:
                    end = i + 1
                    break
        else:
            return s, ""
    else:
        m = re.match(r"(?:" + IDENT + r")(?:\s*\.\s*" + IDENT + r")*", s)
        if not m:
            return "", s
        end = m.end()
        rest = s[end:]
        pm = re.match(r"\s+payable\b", rest)
        if m.group(0) == "address" and pm:
            end += pm.end()
        elif m.group(0) == "function":
            # function types: take through the parameter list and attributes
            return s, ""
    while True:
        j = _skip_ws(s, end)
        if j < len(s) and s[j] == "[":
            close = s.find("]", j)
            if close == -1:
                break
            end = close + 1
        else:
            break
    return s[:end].strip(), s[end:].strip()


def parse_parameters(param_text: str) -> tuple[Parameter, ...]:
    params = []
    for raw in split_top_level(param_text):
        type_text, rest = split_type(raw)
        words = [w for w in rest.split() if w not in STORAGE_LOCATIONS and w != "indexed"]
        name = words[-1] if words and _IDENT_RE.fullmatch(words[-1]) else ""
        params.append(Parameter(name=name, type=type_text))
    return tuple(params)


# ----------------------------------------------------------------------------
# File-level scanning


@dataclass
class _RawFunction:
    contract: str
    simple_name: str
    kind: str
    visibility: str
    mutability: str
    parameters: tuple[Parameter, ...]
    modifier_names: list[str]
    returns: str
    span: SourceSpan
    text: str
    body_range: tuple[int, int] | None  # masked-text offsets of the body interior


@dataclass
class _FileScan:
    source: SourceFile
    masked: str
    contracts: list[ContractDef]
    functions: list[_RawFunction]
    modifiers: list[ModifierDef]


def _iter_members(masked: str, start: int, end: int, path: str, text: str) -> Iterator[tuple[int, int]]:
    """Yield (start, end) of each member declaration between ``start`` and ``end``."""
    i = start
    while True:
        i = _skip_ws(masked, i)
        if i >= end:
            return
        j = i
        paren = 0
        while j < end:
            ch = masked[j]
            if ch in "([":
                paren += 1
            elif ch in ")]":
                paren -= 1
            elif ch == ";" and paren == 0:
                yield i, j + 1
                break
            elif ch == "{" and paren == 0:
                close = _match_close(masked, j, path, text)
                if close >= end:
                    raise SolidityParseError(path, line_of(text, j), _column_of(text, j), "unbalanced '{'")
                yield i, close + 1
                j = close
                break
            elif ch == "}" and paren == 0:
                raise SolidityParseError(path, line_of(text, j), _column_of(text, j), "unexpected '}'")
            j += 1
        else:
            if masked[i:end].strip():
                raise SolidityParseError(
                    path, line_of(text, i), _column_of(text, i), "unterminated declaration"
                )
            return
        i = j + 1


def _span(path: str, text: str, start: int, end: int) -> SourceSpan:
    return SourceSpan(path, line_of(text, start), line_of(text, end - 1), start, end)


_CONTRACT_HEAD_RE = re.compile(
    r"^(abstract\s+contract|contract|interface|library)\s+(" + IDENT + r")\s*(?:is\s+(.*))?$",
    re.S,
)


def scan_source(path: str, text: str) -> _FileScan:
    masked = mask_source(text)
    pragma = None
    abicoder_v2 = False
    for m in re.finditer(r"\bpragma\s+([^;]+);", masked):
        body = text[m.start(1):m.end(1)].strip()
        if body.startswith("solidity") and pragma is None:
            pragma = body[len("solidity"):].strip()
        elif re.search(r"ABIEncoderV2|abicoder\s+v2", body):
            abicoder_v2 = True
    source = SourceFile(path=path, text=text, pragma=pragma, abicoder_v2=abicoder_v2)
    scan = _FileScan(source=source, masked=masked, contracts=[], functions=[], modifiers=[])

    for mstart, mend in _iter_members(masked, 0, len(masked), path, text):
        member = masked[mstart:mend]
        brace = member.find("{")
        head = member[:brace].strip() if brace != -1 else member.strip()
        m = _CONTRACT_HEAD_RE.match(head)
        if not m or brace == -1:
            continue
        kind = "abstract" if m.group(1).startswith("abstract") else m.group(1)
        name = m.group(2)
        bases = []
        if m.group(3):
            for b in split_top_level(m.group(3)):
                bm = re.match(IDENT + r"(?:\." + IDENT + r")*", b)
                if bm:
                    bases.append(bm.group(0).split(".")[-1])
        contract = ContractDef(
            name=name, kind=kind, bases=bases, file=path, span=_span(path, text, mstart, mend)
        )
        scan.contracts.append(contract)
        body_start = mstart + brace + 1
        body_end = mend - 1
        for cstart, cend in _iter_members(masked, body_start, body_end, path, text):
            _scan_member(scan, contract, cstart, cend)
    return scan


def _scan_member(scan: _FileScan, contract: ContractDef, start: int, end: int) -> None:
    masked, text, path = scan.masked, scan.source.text, scan.source.path
    member = masked[start:end]
    km = re.match(r"\s*(" + IDENT + r")", member)
    if not km:
        return
    keyword = km.group(1)
    if keyword in ("function", "constructor", "fallback", "receive"):
        fn = _parse_function(scan, contract, start, end, keyword)
        if fn is not None:
            scan.functions.append(fn)
    elif keyword == "modifier":
        nm = re.match(r"\s*modifier\s+(" + IDENT + r")", member)
        if nm and "{" in member:
            qname = f"{contract.name}.{nm.group(1)}"
            scan.modifiers.append(
                ModifierDef(
                    qualified_name=qname,
                    contract=contract.name,
                    simple_name=nm.group(1),
                    body_text=text[start:end],
                    source_span=_span(path, text, start, end),
                )
            )
    elif keyword == "using":
        um = re.match(r"\s*using\s+(" + IDENT + r"(?:\." + IDENT + r")*)", member)
        if um:
            contract.using.append(um.group(1).split(".")[-1])
    elif keyword == "enum":
        em = re.match(r"\s*enum\s+(" + IDENT + r")", member)
        if em:
            contract.enums.append(em.group(1))
    elif keyword == "struct":
        sm = re.match(r"\s*struct\s+(" + IDENT + r")", member)
        if sm:
            contract.structs.append(sm.group(1))
    elif keyword in ("event", "error", "type"):
        return
    elif member.rstrip().endswith(";"):
        var = _parse_state_var(contract.name, text[start:end], member)
        if var is not None:
            contract.state_vars.append(var)


def _parse_state_var(contract: str, original: str, member: str) -> StateVariable | None:
    decl = member.strip().rstrip(";")
    # cut the initializer: first '=' that is not part of '=>' / '==' at depth 0
    depth = 0
    for i, ch in enumerate(decl):
        if ch in "([{":
            depth += 1
        elif ch in ")]}":
            depth -= 1
        elif ch == "=" and depth == 0 and decl[i + 1:i + 2] not in (">", "=") and decl[i - 1:i] not in ("=", "!", "<", ">"):
            decl = decl[:i]
            break
    type_text, rest = split_type(decl)
    if not type_text:
        return None
    words = rest.split()
    if not words or not _IDENT_RE.fullmatch(words[-1]):
        return None
    attrs = set(words[:-1])
    visibility = next((v for v in VISIBILITIES if v in attrs), "internal")
    return StateVariable(
        name=words[-1],
        type=type_text,
        visibility=visibility,
        contract=contract,
        declaration=original.strip(),
        constant="constant" in attrs or "immutable" in attrs,
    )


def _parse_header_attrs(header: str) -> tuple[list[str], str]:
    """Split a function header tail into (attribute words with args dropped, returns text)."""
    words: list[str] = []
    returns = ""
    i = 0
    n = len(header)
    while i < n:
        i = _skip_ws(header, i)
        if i >= n:
            break
        m = _IDENT_RE.match(header, i)
        if not m:
            i += 1
            continue
        word = m.group(0)
        i = m.end()
        j = _skip_ws(header, i)
        args = None
        if j < n and header[j] == "(":
            depth = 0
            for k in range(j, n):
                if header[k] == "(":
                    depth += 1
                elif header[k] == ")":
                    depth -= 1
                    if depth == 0:
                        args = header[j + 1:k]
                        i = k + 1
                        break
            else:
                i = n
        if word == "returns":
            returns = ",".join(canonical_type(p.type) for p in parse_parameters(args or ""))
            continue
        words.append(word)
    return words, returns


def _parse_function(scan: _FileScan, contract: ContractDef, start: int, end: int, keyword: str) -> _RawFunction | None:
    masked, text, path = scan.masked, scan.source.text, scan.source.path
    member = masked[start:end]
    open_paren = member.find("(")
    if open_paren == -1:
        return None
    name_part = member[:open_paren].split()
    if keyword == "function":
        name = name_part[1] if len(name_part) > 1 else ""
        kind = "function"
        if not name:
            name, kind = "fallback", "fallback"
        elif name == contract.name:
            kind = "constructor"  # pre-0.4.22 constructor
    else:
        name = keyword
        kind = keyword
    close_paren = _match_close(masked, start + open_paren, path, text) - start
    params = parse_parameters(text[start + open_paren + 1:start + close_paren])
    brace = member.find("{", close_paren)
    header_end = brace if brace != -1 else len(member) - 1
    words, returns = _parse_header_attrs(member[close_paren + 1:header_end])
    visibility = next((w for w in words if w in VISIBILITIES), None)
    if visibility is None:
        visibility = "external" if kind in ("fallback", "receive") else "public"
    mutability = next((w for w in words if w in ("view", "pure", "payable", "constant")), "")
    modifier_names = [
        w for w in words if w not in _HEADER_KEYWORDS and w != contract.name and w not in contract.bases
    ]
    if brace == -1:
        return None  # declaration without implementation
    return _RawFunction(
        contract=contract.name,
        simple_name=name,
        kind=kind,
        visibility=visibility,
        mutability=mutability,
        parameters=params,
        modifier_names=modifier_names,
        returns=returns,
        span=_span(path, text, start, end),
        text=text[start:end],
        body_range=(start + brace + 1, end - 1),
    )


# ----------------------------------------------------------------------------
# Linearization and resolution


def _c3(name: str, contracts: dict[str, ContractDef], cache: dict[str, list[str]]) -> list[str]:
    if name in cache:
        return cache[name]
    cache[name] = [name]  # guards against inheritance cycles
    bases = [b for b in contracts[name].bases if b in contracts]
    seqs = [list(_c3(b, contracts, cache)) for b in reversed(bases)] + [list(reversed(bases))]
    result = [name]
    while True:
        seqs = [s for s in seqs if s]
        if not seqs:
            break
        for seq in seqs:
            head = seq[0]
            if not any(head in s[1:] for s in seqs):
                break
        else:
            # inconsistent hierarchy: fall back to depth-first order
            rest = []
            for s in seqs:
                rest.extend(x for x in s if x not in rest and x not in result)
            result.extend(rest)
            break
        result.append(head)
        for s in seqs:
            if s and s[0] == head:
                s.pop(0)
    cache[name] = result
    return result


def _count_args(masked: str, open_pos: int) -> int:
    depth = 0
    for i in range(open_pos, len(masked)):
        if masked[i] == "(":
            depth += 1
        elif masked[i] == ")":
            depth -= 1
            if depth == 0:
                return len(split_top_level(masked[open_pos + 1:i]))
    return 0


_CALL_RE = re.compile(r"(?<![\w$])(" + IDENT + r")\s*\(")


def find_call_sites(body: str) -> list[tuple[str | None, str, int]]:
    """Return (qualifier, name, arg count) for each call-like site in masked ``body``."""
    sites = []
    for m in _CALL_RE.finditer(body):
        name = m.group(1)
        if name in _CALL_SKIP:
            continue
        before = body[:m.start()].rstrip()
        qualifier = None
        if before.endswith("."):
            q = re.search(r"(" + IDENT + r")\s*$", before[:-1])
            qualifier = q.group(1) if q else "<expr>"
        else:
            prev_word = re.search(r"(" + IDENT + r")\s*$", before)
            if prev_word and prev_word.group(1) in ("emit", "new", "function", "event", "error", "modifier"):
                continue
        sites.append((qualifier, name, _count_args(body, m.end() - 1)))
    return sites


# ----------------------------------------------------------------------------
# Project parsing


def discover_sources(root: Path) -> list[Path]:
    root = Path(root)
    if root.is_file():
        return [root]
    found = []
    for p in sorted(root.rglob("*.sol")):
        rel = p.relative_to(root)
        if any(part in _SKIPPED_DIRS for part in rel.parts[:-1]):
            continue
        if p.name.endswith((".t.sol", ".s.sol")):
            continue
        found.append(p)
    return found


def read_remappings(root: Path) -> list[str]:
    path = Path(root) / "remappings.txt"
    if not path.is_file():
        return []
    return [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip() and "=" in ln]


def parse_sources(sources: dict[str, str], root: Path | str = ".", remappings: list[str] | None = None) -> SourceModel:
    """Build a SourceModel from in-memory ``{relative path: text}``."""
    scans = [scan_source(path, sources[path]) for path in sorted(sources)]

    contracts: dict[str, ContractDef] = {}
    for scan in scans:
        for c in scan.contracts:
            if c.name in contracts:
                log.warning("duplicate contract %s in %s ignored (first in %s)", c.name, c.file, contracts[c.name].file)
                continue
            contracts[c.name] = c
    if not contracts:
        raise EmptyProjectError(f"no contracts found under {root}")

    lin_cache: dict[str, list[str]] = {}
    for name, c in contracts.items():
        c.linearization = _c3(name, contracts, lin_cache)

    # qualified names; overloads get signature-qualified names
    raw_by_contract: dict[str, list[_RawFunction]] = {}
    masked_by_file: dict[str, str] = {}
    for scan in scans:
        masked_by_file[scan.source.path] = scan.masked
        for fn in scan.functions:
            if contracts.get(fn.contract) is None or contracts[fn.contract].file != fn.span.file:
                continue
            raw_by_contract.setdefault(fn.contract, []).append(fn)

    modifiers: dict[str, ModifierDef] = {}
    for scan in scans:
        for md in scan.modifiers:
            if contracts.get(md.contract) and contracts[md.contract].file == md.source_span.file:
                if md.qualified_name not in modifiers:
                    modifiers[md.qualified_name] = md
                    contracts[md.contract].modifiers.append(md.qualified_name)

    functions: dict[str, FunctionDef] = {}
    raw_by_qname: dict[str, _RawFunction] = {}
    for cname in sorted(raw_by_contract, key=lambda n: (contracts[n].file, contracts[n].span.start)):
        raws = raw_by_contract[cname]
        counts: dict[str, int] = {}
        for r in raws:
            counts[r.simple_name] = counts.get(r.simple_name, 0) + 1
        for r in raws:
            types = ",".join(canonical_type(p.type) for p in r.parameters)
            qname = f"{cname}.{r.simple_name}"
            if counts[r.simple_name] > 1:
                qname = f"{qname}({types})"
            if qname in functions:
                log.warning("duplicate definition %s ignored", qname)
                continue
            c = contracts[cname]
            is_init = r.kind == "constructor" or (
                r.simple_name.lower().startswith("initiali")
                or any(m in ("initializer", "reinitializer", "onlyInitializing") for m in r.modifier_names)
            )
            functions[qname] = FunctionDef(
                qualified_name=qname,
                contract=cname,
                simple_name=r.simple_name,
                visibility=r.visibility,
                parameters=r.parameters,
                modifiers=tuple(r.modifier_names),
                source_span=r.span,
                body_text=r.text,
                is_constructor_or_initializer=is_init,
                state_mutability=r.mutability,
                returns=r.returns,
                kind=r.kind,
            )
            c.functions.append(qname)
            raw_by_qname[qname] = r

    edges: set[tuple[str, str]] = set()
    modifier_refs: dict[str, tuple[str, ...]] = {}
    for qname, fn in functions.items():
        c = contracts[fn.contract]
        resolved_mods = []
        for mname in fn.modifiers:
            target = _resolve_modifier(mname, c, contracts)
            if target and target not in resolved_mods:
                resolved_mods.append(target)
        if resolved_mods:
            modifier_refs[qname] = tuple(resolved_mods)
        r = raw_by_qname[qname]
        if r.body_range is None:
            continue
        b0, b1 = r.body_range
        body = masked_by_file[fn.source_span.file][b0:b1]
        body = _strip_assembly(body)
        for qualifier, name, argc in find_call_sites(body):
            for target in _resolve_call(qualifier, name, argc, c, contracts, functions):
                edges.add((qname, target))

    graph = CallGraph(nodes=list(functions), edges=sorted(edges), modifier_refs=modifier_refs)
    return SourceModel(
        root=Path(root),
        files={s.source.path: s.source for s in scans},
        contracts=contracts,
        functions=functions,
        modifiers=modifiers,
        call_graph=graph,
        remappings=list(remappings or []),
    )


def _strip_assembly(body: str) -> str:
    """Blank assembly blocks; they produce no edges."""
    out = body
    for m in re.finditer(r"\bassembly\b[^{]*\{", body):
        open_pos = m.end() - 1
        depth = 0
        for i in range(open_pos, len(body)):
            if body[i] == "{":
                depth += 1
            elif body[i] == "}":
                depth -= 1
                if depth == 0:
                    out = out[:m.start()] + " " * (i + 1 - m.start()) + out[i + 1:]
                    break
    return out


def _resolve_modifier(name: str, contract: ContractDef, contracts: dict[str, ContractDef]) -> str | None:
    for cname in contract.linearization:
        qname = f"{cname}.{name}"
        if qname in contracts[cname].modifiers:
            return qname
    return None


def _defs_in(cname: str, name: str, argc: int, contracts: dict[str, ContractDef], functions: dict[str, FunctionDef]) -> list[str]:
    cands = [q for q in contracts[cname].functions if functions[q].simple_name == name and functions[q].kind == "function"]
    if len(cands) > 1:
        exact = [q for q in cands if len(functions[q].parameters) == argc]
        if exact:
            return exact
    return cands


def _resolve_call(qualifier, name, argc, contract: ContractDef, contracts, functions) -> list[str]:
    if qualifier is None or qualifier == "this":
        scope = contract.linearization
    elif qualifier == "super":
        scope = contract.linearization[1:]
    elif qualifier in contracts:
        scope = contracts[qualifier].linearization
    else:
        # member call on an expression: only `using` libraries can bind it
        libs = []
        for cname in contract.linearization:
            for lib in contracts[cname].using:
                if lib in contracts and lib not in libs:
                    libs.append(lib)
        scope = libs
        for cname in scope:
            hits = _defs_in(cname, name, argc + 1, contracts, functions)
            if hits:
                return hits
        return []
    for cname in scope:
        hits = _defs_in(cname, name, argc, contracts, functions)
        if hits:
            return hits
    return []


def parse_project(root: Path | str) -> SourceModel:
    """Parse every Solidity file under ``root`` (or a single file)."""
    root = Path(root)
    paths = discover_sources(root)
    if not paths:
        raise EmptyProjectError(f"no Solidity files under {root}")
    base = root.parent if root.is_file() else root
    sources = {p.relative_to(base).as_posix(): p.read_text(encoding="utf-8") for p in paths}
    return parse_sources(sources, root=base, remappings=read_remappings(base))


def load_callgraph_export(path: Path | str, model: SourceModel) -> CallGraph:
    """Replace the native call graph with an external export.

    The export is JSON: ``{"edges": [["Caller.qualified", "Callee.qualified"], ...]}``.
    Edges whose endpoints are not in the catalog are dropped.
    """
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    known = set(model.functions)
    edges = []
    for a, b in data.get("edges", []):
        if a in known and b in known:
            edges.append((a, b))
        else:
            log.info("dropping external edge %s -> %s (not in catalog)", a, b)
    graph = CallGraph(nodes=list(model.functions), edges=edges, modifier_refs=dict(model.call_graph.modifier_refs))
    model.call_graph = graph
    return graph


# ----------------------------------------------------------------------------
# Public ABI


def _getter_shape(type_text: str, known_values: set[str]) -> tuple[list[str], str] | None:
    t = type_text.strip()
    params: list[str] = []
    while True:
        if t.startswith("mapping"):
            inner = t[t.find("(") + 1:t.rfind(")")]
            depth = 0
            for i in range(len(inner) - 1):
                ch = inner[i]
                if ch == "(":
                    depth += 1
                elif ch == ")":
                    depth -= 1
                elif inner[i:i + 2] == "=>" and depth == 0:
                    key = inner[:i].strip().split()[0]
                    value = inner[i + 2:].strip()
                    break
            else:
                return None
            if not (_ELEMENTARY_RE.match(key) or key in known_values):
                return None
            params.append("address" if key in known_values and not _ELEMENTARY_RE.match(key) else canonical_type(key))
            t = value
            continue
        am = re.match(r"^(.*)\[\s*[^\]]*\]$", t, re.S)
        if am:
            params.append("uint256")
            t = am.group(1).strip()
            continue
        break
    if _ELEMENTARY_RE.match(t):
        return params, canonical_type(t)
    if t in known_values:
        return params, "address"
    return None


def public_abi(model: SourceModel, contracts: Iterable[str] | None = None) -> list[CallableDescriptor]:
    """Externally callable functions plus synthesized getters for public state variables."""
    wanted = set(contracts) if contracts is not None else None
    address_like = {n for n, c in model.contracts.items() if c.kind in ("contract", "abstract", "interface")}
    out: list[CallableDescriptor] = []
    for cname, c in model.contracts.items():
        if c.kind == "interface" or (wanted is not None and cname not in wanted):
            continue
        for qname in c.functions:
            fn = model.functions[qname]
            if fn.kind != "function" or fn.visibility not in ("public", "external"):
                continue
            out.append(
                CallableDescriptor(
                    contract=cname,
                    name=fn.simple_name,
                    param_types=fn.param_types,
                    returns=fn.returns,
                    kind="function",
                    state_mutability=fn.state_mutability,
                )
            )
        for var in c.state_vars:
            if var.visibility != "public":
                continue
            shape = _getter_shape(var.type, address_like)
            if shape is None:
                log.info("no getter synthesized for %s.%s of type %s", cname, var.name, var.type)
                continue
            params, ret = shape
            out.append(
                CallableDescriptor(
                    contract=cname, name=var.name, param_types=tuple(params),
                    returns=ret, kind="getter", state_mutability="view",
                )
            )
    return out
