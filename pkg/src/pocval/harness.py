"""Per-finding Foundry workspaces and the compile / test executors.

A workspace is a copy of the project (``lib/`` is symlinked, existing tests
and build output are left out) with a generated ``foundry.toml`` and a single
PoC test at ``test/PoC.t.sol``. The original project is never written to.
"""

from __future__ import annotations

import json
import logging
import re
import shutil
import subprocess
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

from .errors import BundleError, ConfigurationError, EnvironmentSetupError, SanitizeError, ToolchainMissingError
from .solidity import is_legacy_compiler

log = logging.getLogger(__name__)

TEST_RELPATH = "test/PoC.t.sol"
DEFAULT_TIMEOUT = 600.0
_COPY_IGNORE = {"out", "cache", ".git", "broadcast", "lib", "node_modules", "test", "script"}
_LINKED = ("lib", "node_modules")


@dataclass
class Workspace:
    finding_id: str
    root: Path
    project_root: Path
    src_dir: str
    compiler_version: str
    remappings: list[str] = field(default_factory=list)
    legacy_abi: bool = False
    fork_url: str | None = None
    head_block: int | None = None

    @property
    def test_path(self) -> Path:
        return self.root / TEST_RELPATH

    def import_path(self, project_file: str) -> str:
        return target_import_path(project_file)


def target_import_path(project_file: str) -> str:
    """Import string for a project file as seen from ``test/PoC.t.sol``."""
    return "../" + project_file.removeprefix("./")


@dataclass(frozen=True)
class FailureItem:
    message: str
    file: str | None = None
    line: int | None = None


@dataclass
class Diagnostics:
    phase: str  # compile | runtime | sanitize | instrument
    success: bool
    raw: str = ""
    items: list[FailureItem] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.success and not self.raw.strip():
            self.raw = f"{self.phase} failed without output"

    def render(self) -> str:
        lines = [f"[{self.phase}] {'ok' if self.success else 'FAILED'}"]
        for it in self.items:
            where = f" ({it.file}:{it.line})" if it.file else ""
            lines.append(f"- {it.message}{where}")
        lines.append(self.raw.rstrip())
        return "\n".join(lines)


@dataclass
class ExecutionOutcome:
    ok_c: bool
    ok_r: bool
    compile_diag: Diagnostics
    runtime_diag: Diagnostics | None
    logs: list[str] = field(default_factory=list)

    @property
    def failure(self) -> Diagnostics | None:
        if not self.ok_c:
            return self.compile_diag
        if not self.ok_r:
            return self.runtime_diag
        return None


# ----------------------------------------------------------------------------
# Workspace lifecycle


def _detect_src_dir(root: Path) -> str:
    for cand in ("src", "contracts"):
        if (root / cand).is_dir():
            return cand
    return "."


def _toml_str(s: str) -> str:
    return json.dumps(s)


def write_foundry_config(ws: Workspace) -> None:
    lines = [
        "[profile.default]",
        f"src = {_toml_str(ws.src_dir)}",
        'test = "test"',
        'out = "out"',
        'libs = ["lib"]',
        f"solc_version = {_toml_str(ws.compiler_version)}",
        "remappings = [" + ", ".join(_toml_str(r) for r in ws.remappings) + "]",
    ]
    if ws.head_block is not None:
        lines.append(f"fork_block_number = {ws.head_block}")
    if ws.legacy_abi:
        lines.insert(0, "# legacy compiler: tests need `pragma experimental ABIEncoderV2;`")
    (ws.root / "foundry.toml").write_text("\n".join(lines) + "\n", encoding="utf-8")
    meta = asdict(ws)
    meta["root"] = str(ws.root)
    meta["project_root"] = str(ws.project_root)
    (ws.root / "pocval-workspace.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")


def fetch_head_block(rpc_url: str, timeout: float = 30.0) -> int:
    import httpx

    try:
        resp = httpx.post(rpc_url, json={"jsonrpc": "2.0", "id": 1, "method": "eth_blockNumber", "params": []}, timeout=timeout)
        resp.raise_for_status()
        return int(resp.json()["result"], 16)
    except (httpx.HTTPError, KeyError, ValueError) as exc:
        raise EnvironmentSetupError(f"cannot query head block from fork RPC: {exc}") from exc


def init_workspace(finding_id: str, bundle, project_root: Path | str, base_dir: Path | str,
                   fork_url: str | None = None,
                   head_block_fn: Callable[[str], int] | None = None) -> Workspace:
    """Create a fresh, isolated workspace under ``base_dir/workspace``."""
    project_root = Path(project_root).resolve()
    if project_root.is_file():
        project_root = project_root.parent
    root = Path(base_dir).resolve() / "workspace"
    meta = bundle.build_metadata
    for rel in meta.target_files:
        if not (project_root / rel).is_file():
            raise BundleError(f"bundle target file {rel} missing under {project_root}")
    try:
        if root.exists():
            shutil.rmtree(root)
        root.parent.mkdir(parents=True, exist_ok=True)
        shutil.copytree(
            project_root, root,
            ignore=lambda d, names: [n for n in names if Path(d) == project_root and n in _COPY_IGNORE],
        )
        for name in _LINKED:
            if (project_root / name).exists():
                (root / name).symlink_to(project_root / name, target_is_directory=True)
        (root / "test").mkdir(exist_ok=True)
    except OSError as exc:
        raise EnvironmentSetupError(f"cannot create workspace for {finding_id}: {exc}") from exc

    head = None
    if fork_url:
        head = (head_block_fn or fetch_head_block)(fork_url)
        log.info("finding %s: forking at head block %s", finding_id, head)
    ws = Workspace(
        finding_id=finding_id,
        root=root,
        project_root=project_root,
        src_dir=_detect_src_dir(root),
        compiler_version=meta.compiler_version,
        remappings=list(meta.remappings),
        legacy_abi=is_legacy_compiler(meta.compiler_version),
        fork_url=fork_url,
        head_block=head,
    )
    write_foundry_config(ws)
    return ws


def write_test(ws: Workspace, script) -> Path:
    """Write the draft (a PoCDraft, str, or bytes) as the workspace test file."""
    text = getattr(script, "text", script)
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SanitizeError(f"draft is not valid UTF-8: {exc}") from exc
    try:
        data = text.encode("utf-8")
    except UnicodeEncodeError as exc:
        raise SanitizeError(f"draft is not valid UTF-8: {exc}") from exc
    ws.test_path.parent.mkdir(parents=True, exist_ok=True)
    ws.test_path.write_bytes(data)
    return ws.test_path


# ----------------------------------------------------------------------------
# Output parsing

_COMPILE_ERR_RE = re.compile(
    r"^(?:Error|error)(?:\s*\(\d+\))?(?:\[\w+\])?:\s*(?P<msg>.+?)\s*\n(?:.*\n)??\s*-->\s*(?P<file>[^:\n]+):(?P<line>\d+)",
    re.M,
)
_FAIL_RE = re.compile(r"^\[FAIL(?::\s*|\.\s*(?:Reason:\s*)?)?(?P<reason>[^\]]*)\]\s*(?P<test>[\w$]+)\(", re.M)


def parse_compile_output(raw: str) -> list[FailureItem]:
    items = [
        FailureItem(m.group("msg"), m.group("file").strip(), int(m.group("line")))
        for m in _COMPILE_ERR_RE.finditer(raw)
    ]
    if not items:
        items = [FailureItem(ln.strip()) for ln in raw.splitlines() if re.match(r"\s*(Error|error)\b", ln)]
    return items


def parse_runtime_output(raw: str) -> list[FailureItem]:
    return [
        FailureItem(f"{m.group('test')}: {m.group('reason').strip() or 'failed'}")
        for m in _FAIL_RE.finditer(raw)
    ]


def extract_logs(raw: str) -> list[str]:
    """Console lines printed under ``Logs:`` sections, in order."""
    logs: list[str] = []
    in_logs = False
    for line in raw.splitlines():
        if line.strip() == "Logs:":
            in_logs = True
            continue
        if in_logs:
            if line.startswith("  ") and line.strip():
                logs.append(line[2:].rstrip())
                continue
            in_logs = False
    return logs


# ----------------------------------------------------------------------------
# Executors


class Executor(Protocol):
    def compile(self, ws: Workspace) -> tuple[bool, Diagnostics]: ...

    def run_tests(self, ws: Workspace) -> tuple[bool, Diagnostics, list[str]]: ...


def forge_test_command(ws: Workspace) -> list[str]:
    if ws.fork_url:
        return ["forge", "test", "-vvvv", "--fork-url", ws.fork_url]
    return ["forge", "test", "-vvvv"]


BUILD_COMMAND = ["forge", "build"]


class ForgeExecutor:
    """Runs the real ``forge`` binary in the workspace."""

    def __init__(self, timeout: float = DEFAULT_TIMEOUT, forge_bin: str = "forge"):
        resolved = shutil.which(forge_bin)
        if resolved is None:
            raise ToolchainMissingError(f"{forge_bin!r} not found on PATH; install Foundry or use the fake executor")
        self.forge_bin = resolved
        self.timeout = timeout

    def _run(self, ws: Workspace, argv: list[str], phase: str) -> tuple[int | None, str]:
        cmd = [self.forge_bin, *argv[1:]]
        try:
            proc = subprocess.run(cmd, cwd=ws.root, capture_output=True, text=True, timeout=self.timeout)
        except subprocess.TimeoutExpired as exc:
            out = (exc.stdout or "") if isinstance(exc.stdout, str) else ""
            return None, out + f"\n{phase} timed out after {self.timeout:.0f} s"
        except FileNotFoundError as exc:
            raise ToolchainMissingError(str(exc)) from exc
        return proc.returncode, (proc.stdout or "") + (proc.stderr or "")

    def compile(self, ws: Workspace) -> tuple[bool, Diagnostics]:
        code, out = self._run(ws, BUILD_COMMAND, "compile")
        ok = code == 0
        return ok, Diagnostics("compile", ok, out, [] if ok else parse_compile_output(out))

    def run_tests(self, ws: Workspace) -> tuple[bool, Diagnostics, list[str]]:
        code, out = self._run(ws, forge_test_command(ws), "runtime")
        ok = code == 0
        return ok, Diagnostics("runtime", ok, out, [] if ok else parse_runtime_output(out)), extract_logs(out)


@dataclass
class FakeRun:
    ok_c: bool = True
    ok_r: bool = True
    compile_output: str = ""
    runtime_output: str = ""
    logs: list[str] = field(default_factory=list)
    repeat: bool = False
    delay: float = 0.0
    crash: bool = False

    @classmethod
    def from_json(cls, d: dict) -> "FakeRun":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


class FakeExecutor:
    """Scripted executor for offline runs.

    ``runs`` maps a finding id to the sequence of executions it will see; each
    compile call consumes the next entry and the following ``run_tests`` call
    uses the same entry. An entry with ``repeat`` is reused forever. Script
    files are JSON: ``{"runs": {"F1": [{...}, ...]}, "default": {...}}``.
    """

    def __init__(self, runs: dict[str, list[FakeRun]] | None = None, default: FakeRun | None = None):
        self.runs = {k: list(v) for k, v in (runs or {}).items()}
        self.default = default
        self._pos: dict[str, int] = {}
        self._current: dict[str, FakeRun] = {}
        self._lock = threading.Lock()
        self.history: list[tuple[str, str]] = []
        self.in_flight = 0
        self.peak_in_flight = 0
        self._active: dict[str, int] = {}
        self.peak_active_findings = 0

    @classmethod
    def from_file(cls, path: Path | str) -> "FakeExecutor":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        runs = {k: [FakeRun.from_json(r) for r in v] for k, v in data.get("runs", {}).items()}
        default = FakeRun.from_json(data["default"]) if data.get("default") else None
        return cls(runs, default)

    def _next(self, fid: str) -> FakeRun:
        seq = self.runs.get(fid)
        if seq is None:
            if self.default is None:
                raise ConfigurationError(f"fake executor has no script for finding {fid!r}")
            return self.default
        i = self._pos.get(fid, 0)
        if i >= len(seq):
            if seq and seq[-1].repeat:
                return seq[-1]
            raise ConfigurationError(f"fake executor script for {fid!r} exhausted after {len(seq)} runs")
        self._pos[fid] = i + 1
        return seq[i]

    def _enter(self, fid: str) -> None:
        with self._lock:
            self.in_flight += 1
            self.peak_in_flight = max(self.peak_in_flight, self.in_flight)
            self._active[fid] = self._active.get(fid, 0) + 1
            self.peak_active_findings = max(self.peak_active_findings, len(self._active))

    def _leave(self, fid: str) -> None:
        with self._lock:
            self.in_flight -= 1
            self._active[fid] -= 1
            if not self._active[fid]:
                del self._active[fid]

    def compile(self, ws: Workspace) -> tuple[bool, Diagnostics]:
        fid = ws.finding_id
        self._enter(fid)
        try:
            with self._lock:
                run = self._next(fid)
                self._current[fid] = run
                self.history.append((fid, "compile"))
            if run.delay:
                time.sleep(run.delay)
            if run.crash:
                raise RuntimeError(f"injected executor fault for {fid}")
            out = run.compile_output or ("Compiler run successful" if run.ok_c else "Error: compilation failed")
            return run.ok_c, Diagnostics("compile", run.ok_c, out, [] if run.ok_c else parse_compile_output(out))
        finally:
            self._leave(fid)

    def run_tests(self, ws: Workspace) -> tuple[bool, Diagnostics, list[str]]:
        fid = ws.finding_id
        self._enter(fid)
        try:
            with self._lock:
                run = self._current.get(fid)
                self.history.append((fid, "test"))
            if run is None:
                raise ConfigurationError("run_tests called before compile")
            out = run.runtime_output
            if not out:
                status = "PASS" if run.ok_r else "FAIL: revert"
                out = f"[{status}] testExploit() (gas: 0)"
                if run.logs:
                    out += "\nLogs:\n" + "\n".join(f"  {ln}" for ln in run.logs)
            logs = list(run.logs) if run.logs else extract_logs(out)
            return run.ok_r, Diagnostics("runtime", run.ok_r, out, [] if run.ok_r else parse_runtime_output(out)), logs
        finally:
            self._leave(fid)


def execute(ws: Workspace, executor: Executor) -> ExecutionOutcome:
    """Compile, then run tests only when compilation succeeded."""
    ok_c, cdiag = executor.compile(ws)
    if not ok_c:
        return ExecutionOutcome(False, False, cdiag, None, [])
    ok_r, rdiag, logs = executor.run_tests(ws)
    return ExecutionOutcome(True, ok_r, cdiag, rdiag, logs)
