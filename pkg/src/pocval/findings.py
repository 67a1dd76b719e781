"""Finding corpus: loading, analyzer adapters, severity filtering, normalization.

Native format is JSON Lines, one record per finding::

    {"id": "F1", "tool": "slither", "project_ref": "token",
     "narrative": "...", "severity": "High", "type": "reentrancy",
     "locations": ["withdraw", {"file": "src/Bank.sol", "line": 42},
                   {"file": "src/Bank.sol", "offset": 1234}],
     "label": true}

``type``, ``label`` and ``narrative`` are optional. A location is a function
name (simple or ``Contract.fn``), or an object with ``line`` or ``offset``
and an optional ``file``. ``native-json`` accepts the same records as a JSON
array (or ``{"findings": [...]}``).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Union

from .errors import ConfigurationError, FindingsParseError, UnresolvableLocationError
from .solidity import SourceModel, line_of

HIGH_SEVERITIES = {"high", "critical"}


@dataclass(frozen=True)
class LineLocation:
    line: int
    file: str | None = None

    def to_json(self) -> dict:
        d: dict[str, Any] = {"line": self.line}
        if self.file:
            d["file"] = self.file
        return d


@dataclass(frozen=True)
class OffsetLocation:
    offset: int
    file: str | None = None

    def to_json(self) -> dict:
        d: dict[str, Any] = {"offset": self.offset}
        if self.file:
            d["file"] = self.file
        return d


Location = Union[str, LineLocation, OffsetLocation]


@dataclass(frozen=True)
class Finding:
    id: str
    tool: str
    project_ref: str
    narrative: str
    severity: str
    locations: tuple[Location, ...] = ()
    vuln_type: str = ""
    label: bool | None = None

    @property
    def is_high(self) -> bool:
        return self.severity.strip().lower() in HIGH_SEVERITIES

    @property
    def function_names(self) -> list[str]:
        return [loc for loc in self.locations if isinstance(loc, str)]

    def to_json(self) -> dict:
        d: dict[str, Any] = {
            "id": self.id,
            "tool": self.tool,
            "project_ref": self.project_ref,
            "narrative": self.narrative,
            "severity": self.severity,
            "locations": [loc if isinstance(loc, str) else loc.to_json() for loc in self.locations],
        }
        if self.vuln_type:
            d["type"] = self.vuln_type
        if self.label is not None:
            d["label"] = self.label
        return d


@dataclass
class FindingCorpus:
    items: list[Finding] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for f in self.items:
            if f.id in seen:
                raise FindingsParseError(f"duplicate finding id {f.id!r}", field="id")
            seen.add(f.id)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def high_only(self) -> "FindingCorpus":
        return FindingCorpus([f for f in self.items if f.is_high], dict(self.metadata))

    @property
    def projects(self) -> dict[str, list[str]]:
        index: dict[str, list[str]] = {}
        for f in self.items:
            index.setdefault(f.project_ref, []).append(f.id)
        return index


def _parse_location(raw: Any, line: int | None) -> Location:
    if isinstance(raw, str):
        if not raw.strip():
            raise FindingsParseError("empty location", line=line, field="locations")
        return raw.strip()
    if isinstance(raw, dict):
        if "line" in raw:
            return LineLocation(int(raw["line"]), raw.get("file"))
        if "offset" in raw:
            return OffsetLocation(int(raw["offset"]), raw.get("file"))
        if "function" in raw:
            return str(raw["function"])
    raise FindingsParseError(f"unrecognised location {raw!r}", line=line, field="locations")


def finding_from_record(rec: Any, line: int | None = None) -> Finding:
    if not isinstance(rec, dict):
        raise FindingsParseError("record is not an object", line=line)
    for key in ("id", "severity"):
        if key not in rec:
            raise FindingsParseError("missing required field", line=line, field=key)
    locs = rec.get("locations", [])
    if not isinstance(locs, list):
        raise FindingsParseError("must be a list", line=line, field="locations")
    label = rec.get("label")
    if label is not None and not isinstance(label, bool):
        raise FindingsParseError("must be a boolean", line=line, field="label")
    return Finding(
        id=str(rec["id"]),
        tool=str(rec.get("tool", "")),
        project_ref=str(rec.get("project_ref", "")),
        narrative=str(rec.get("narrative") or ""),
        severity=str(rec["severity"]),
        locations=tuple(_parse_location(x, line) for x in locs),
        vuln_type=str(rec.get("type") or rec.get("vuln_type") or ""),
        label=label,
    )


def _load_jsonl(text: str) -> list[Finding]:
    out = []
    for n, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise FindingsParseError(f"invalid JSON: {exc.msg}", line=n) from None
        out.append(finding_from_record(rec, line=n))
    return out


def _load_json(text: str) -> list[Finding]:
    try:
        data = json.loads(text) if text.strip() else []
    except json.JSONDecodeError as exc:
        raise FindingsParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    if isinstance(data, dict):
        data = data.get("findings", [])
    if not isinstance(data, list):
        raise FindingsParseError("expected an array of findings", field="findings")
    return [finding_from_record(rec, line=None) for rec in data]


# --- analyzer adapters -------------------------------------------------------


def _adapt_slither(text: str, project_ref: str) -> list[Finding]:
    data = json.loads(text)
    detectors = data.get("results", {}).get("detectors", [])
    out = []
    for i, det in enumerate(detectors):
        locs: list[Location] = []
        for el in det.get("elements", []):
            if el.get("type") == "function":
                parent = el.get("type_specific_fields", {}).get("parent", {}).get("name")
                locs.append(f"{parent}.{el['name']}" if parent else el["name"])
            else:
                sm = el.get("source_mapping", {})
                lines = sm.get("lines") or []
                if lines:
                    locs.append(LineLocation(int(lines[0]), sm.get("filename_relative")))
        out.append(
            Finding(
                id=det.get("id") or f"slither-{i}",
                tool="slither",
                project_ref=project_ref,
                narrative=(det.get("description") or "").strip(),
                severity=det.get("impact", ""),
                locations=tuple(dict.fromkeys(locs)),
                vuln_type=det.get("check", ""),
            )
        )
    return out


def _adapt_mythril(text: str, project_ref: str) -> list[Finding]:
    data = json.loads(text)
    issues = data.get("issues", []) if isinstance(data, dict) else data
    out = []
    for i, issue in enumerate(issues):
        locs: list[Location] = []
        fn = issue.get("function")
        if fn:
            locs.append(fn.split("(", 1)[0])
        elif issue.get("lineno") is not None:
            locs.append(LineLocation(int(issue["lineno"]), issue.get("filename")))
        out.append(
            Finding(
                id=f"mythril-{issue.get('swc-id', 'x')}-{i}",
                tool="mythril",
                project_ref=project_ref,
                narrative=(issue.get("description") or "").strip(),
                severity=issue.get("severity", ""),
                locations=tuple(locs),
                vuln_type=issue.get("title", ""),
            )
        )
    return out


ADAPTERS: dict[str, Callable[[str, str], list[Finding]]] = {
    "slither": _adapt_slither,
    "mythril": _adapt_mythril,
}
FORMATS = ("native", "native-json", *ADAPTERS)


def load_findings(path: Path | str, format: str = "native", project_ref: str = "") -> FindingCorpus:
    """Load a findings file. Raw locations are preserved; nothing is filtered."""
    if format not in FORMATS:
        raise ConfigurationError(f"unknown findings format {format!r} (expected one of {', '.join(FORMATS)})")
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if format == "native":
        items = _load_jsonl(text)
    elif format == "native-json":
        items = _load_json(text)
    else:
        try:
            items = ADAPTERS[format](text, project_ref)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FindingsParseError(f"{format} report: {exc}") from None
    return FindingCorpus(items, {"source": str(path), "format": format})


def save_findings(corpus: FindingCorpus, path: Path | str) -> None:
    lines = [json.dumps(f.to_json(), sort_keys=True) for f in corpus.items]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


# --- normalization ----------------------------------------------------------


def _function_at_line(model: SourceModel, line: int, file: str | None) -> str | None:
    best = None
    for fn in model.functions.values():
        span = fn.source_span
        if file is not None and not _same_file(span.file, file):
            continue
        if span.start_line <= line <= span.end_line:
            size = span.end_line - span.start_line
            if best is None or size < best[0]:
                best = (size, fn)
    return best[1].simple_name if best else None


def _same_file(model_path: str, reported: str) -> bool:
    reported = reported.replace("\\", "/").lstrip("./")
    return model_path == reported or model_path.endswith("/" + reported) or reported.endswith("/" + model_path)


def resolve_location(loc: Location, model: SourceModel) -> str:
    if isinstance(loc, str):
        if not model.lookup(loc):
            raise UnresolvableLocationError(loc, "not in the function catalog")
        return loc
    if isinstance(loc, OffsetLocation):
        files = [f for f in model.files if loc.file is None or _same_file(f, loc.file)]
        if len(files) != 1:
            raise UnresolvableLocationError(loc, "offset needs exactly one matching file")
        text = model.files[files[0]].text
        if not 0 <= loc.offset < len(text):
            raise UnresolvableLocationError(loc, "offset outside file")
        loc = LineLocation(line_of(text, loc.offset), files[0])
    name = _function_at_line(model, loc.line, loc.file)
    if name is None:
        raise UnresolvableLocationError(loc)
    return name


def normalize_finding(f: Finding, model: SourceModel) -> Finding:
    """Resolve every location to a catalog function name and fill an empty narrative."""
    names: list[str] = []
    for loc in f.locations:
        name = resolve_location(loc, model)
        if name not in names:
            names.append(name)
    narrative = f.narrative.strip() or f.vuln_type.strip()
    if not narrative:
        raise FindingsParseError(f"finding {f.id} has neither narrative nor type name", field="narrative")
    return dataclasses.replace(f, locations=tuple(names), narrative=narrative)
