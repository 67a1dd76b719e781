"""End-to-end driver: ingest, parse, BCE, GRE, DV, report.

Each worker owns one finding from start to verdict. The source model is
parsed once per project and shared read-only. Output layout per finding:

    out/<id>/bundle/         context + manifest
    out/<id>/workspace/      Foundry project the PoC runs in
    out/<id>/attempts/gre/k  prompt, draft, diagnostics of attempt k
    out/<id>/attempts/dv/k   same for the instrumentation loop
    out/<id>/verdict.json
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .bce import BugContextBundle, extract_bug_context
from .dv import GENERATION_FAILED, NOT_VALIDATED, Verdict, run_dv
from .engine import EngineConfig, run_engine
from .errors import (
    ConfigurationError, FindingsParseError, PocvalError, StageOrderError, ToolchainMissingError,
    UnresolvableLocationError,
)
from .findings import Finding, finding_from_record, load_findings, normalize_finding
from .harness import Diagnostics, Executor, FakeExecutor, FakeRun, ForgeExecutor, Workspace, init_workspace
from .llm import ChatCompletionsBackend, CostLedger, LlmGateway, StageCost, TranscriptBackend
from .metrics import RunReport, emit_report
from .solidity import SourceModel, parse_project

log = logging.getLogger(__name__)

VERDICT_FILE = "verdict.json"


@dataclass
class RunConfig:
    findings: Path
    project: Path
    out: Path
    format: str = "native"
    workers: int = 32
    engine: EngineConfig = field(default_factory=EngineConfig)
    transcript: Path | None = None
    llm_endpoint: str | None = None
    model: str | None = None
    fake_executor: Path | bool | None = None  # True: every run passes
    fork_url: str | None = None
    resume: bool = False
    max_in_flight: int = 32
    high_only: bool = True
    # Pre-built services; tests inject these instead of paths.
    llm: LlmGateway | None = None
    executor: Executor | None = None

    def __post_init__(self) -> None:
        self.findings = Path(self.findings)
        self.project = Path(self.project)
        self.out = Path(self.out)
        if self.transcript is not None:
            self.transcript = Path(self.transcript)

    def check(self) -> None:
        if self.workers < 1:
            raise ConfigurationError("worker count must be >= 1")
        if self.llm is None:
            if self.transcript is None and not self.llm_endpoint and not os.environ.get("POCVAL_LLM_BASE_URL"):
                raise ConfigurationError("choose an LLM backend: --transcript T or --llm-endpoint URL")
            if self.transcript is not None and not self.transcript.is_file():
                raise ConfigurationError(f"transcript {self.transcript} not found")
        if not self.findings.is_file():
            raise ConfigurationError(f"findings file {self.findings} not found")
        if not self.project.exists():
            raise ConfigurationError(f"project {self.project} not found")

    def echo(self) -> dict:
        return {
            "findings": str(self.findings),
            "format": self.format,
            "project": str(self.project),
            "workers": self.workers,
            "budget": self.engine.retry_budget,
            "temperature": self.engine.temperature,
            "timeout": self.engine.timeout,
            "backend": "transcript" if self.transcript else ("live" if self.llm is None else "injected"),
            "executor": "fake" if self.fake_executor or self.executor is not None else "forge",
            "fork_url": bool(self.fork_url),
            "max_in_flight": self.max_in_flight,
        }


def build_gateway(config: RunConfig, ledger: CostLedger) -> LlmGateway:
    if config.llm is not None:
        return config.llm
    if config.transcript is not None:
        backend = TranscriptBackend.from_file(config.transcript)
    else:
        backend = ChatCompletionsBackend(base_url=config.llm_endpoint, model=config.model)
    return LlmGateway(backend, ledger, max_in_flight=config.max_in_flight)


def build_executor(config: RunConfig) -> Executor:
    if config.executor is not None:
        return config.executor
    if config.fake_executor is True:
        return FakeExecutor(default=FakeRun())
    if config.fake_executor:
        return FakeExecutor.from_file(config.fake_executor)
    return ForgeExecutor(timeout=config.engine.timeout)


class _LedgerExecutor:
    """Charges compile and test wall time to the ledger (no LLM calls)."""

    def __init__(self, inner: Executor, ledger: CostLedger):
        self.inner = inner
        self.ledger = ledger

    def compile(self, ws: Workspace) -> tuple[bool, Diagnostics]:
        with self.ledger.timed(ws.finding_id, "forge-build"):
            return self.inner.compile(ws)

    def run_tests(self, ws: Workspace):
        with self.ledger.timed(ws.finding_id, "forge-test"):
            return self.inner.run_tests(ws)


class ModelCache:
    """One SourceModel per project root, built at most once."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._slots: dict[Path, tuple[threading.Lock, list]] = {}

    def get(self, root: Path) -> SourceModel:
        root = root.resolve()
        with self._lock:
            slot = self._slots.setdefault(root, (threading.Lock(), []))
        lock, box = slot
        with lock:
            if not box:
                try:
                    box.append(parse_project(root))
                except PocvalError as exc:
                    box.append(exc)
        if isinstance(box[0], Exception):
            raise box[0]
        return box[0]


def project_root_for(f: Finding, base: Path) -> Path:
    if f.project_ref:
        cand = base / f.project_ref
        if cand.exists():
            return cand
    return base


def aggregate_costs(verdicts: list[Verdict]) -> dict:
    """Per-finding costs plus the run total, rebuilt from verdict records."""
    out: dict = {}
    stages: dict[str, StageCost] = {}
    for v in verdicts:
        if not v.costs:
            continue
        out[v.finding_id] = v.costs
        for name, sc in v.costs.get("stages", {}).items():
            stages.setdefault(name, StageCost()).add(StageCost(
                sc["input_tokens"], sc["output_tokens"], sc["seconds"], sc["calls"], sc.get("estimated", False)
            ))
    total = StageCost()
    for sc in stages.values():
        total.add(sc)
    out["__all__"] = {"stages": {k: v.to_json() for k, v in sorted(stages.items())}, "total": total.to_json()}
    return out


def _write_verdict(path: Path, v: Verdict, f: Finding) -> None:
    record = v.to_json()
    record["finding"] = f.to_json()
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(record, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


class Pipeline:
    def __init__(self, config: RunConfig, executor: bool = True):
        config.check()
        self.config = config
        self.ledger = config.llm.ledger if config.llm is not None else CostLedger()
        # built first so a missing toolchain fails before any LLM traffic; slice needs none
        self.executor = build_executor(config) if executor else None
        self.llm = build_gateway(config, self.ledger)
        self.models = ModelCache()
        self._exec = _LedgerExecutor(self.executor, self.ledger) if executor else None

    def _model(self, f: Finding) -> tuple[Path, SourceModel]:
        root = project_root_for(f, self.config.project)
        with self.ledger.timed(f.id, "parse"):
            return root, self.models.get(root)

    def _bundle(self, f: Finding, root: Path, model: SourceModel) -> tuple[Finding, BugContextBundle]:
        nf = normalize_finding(f, model)
        bundle = extract_bug_context(nf, model, self.llm)
        bundle.export(self.config.out / f.id / "bundle")
        return nf, bundle

    def process(self, f: Finding) -> Verdict:
        fdir = self.config.out / f.id
        vpath = fdir / VERDICT_FILE
        if self.config.resume and vpath.is_file():
            log.info("finding %s: verdict exists, skipping", f.id)
            return Verdict.from_json(json.loads(vpath.read_text(encoding="utf-8")))
        fdir.mkdir(parents=True, exist_ok=True)
        started = time.monotonic()
        try:
            v = self._run(f, fdir)
        except ToolchainMissingError:
            raise
        except (FindingsParseError, UnresolvableLocationError) as exc:
            log.warning("finding %s rejected: %s", f.id, exc)
            v = Verdict(f.id, NOT_VALIDATED, f"rejected during normalization: {exc}", status="rejected")
        except Exception as exc:  # per-finding isolation
            log.error("finding %s failed: %s: %s", f.id, type(exc).__name__, exc)
            v = Verdict(f.id, NOT_VALIDATED, f"error: {type(exc).__name__}: {exc}", status="error")
        v.costs = self.ledger.export(f.id)
        _write_verdict(vpath, v, f)
        log.info("finding %s: %s (%.2f s)", f.id, v.decision, time.monotonic() - started)
        return v

    def _run(self, f: Finding, fdir: Path) -> Verdict:
        cfg = self.config
        root, model = self._model(f)
        nf, bundle = self._bundle(f, root, model)
        ws = init_workspace(f.id, bundle, root, fdir, cfg.fork_url)
        res = run_engine(nf, bundle, ws, cfg.engine, self.llm, self._exec, fdir / "attempts" / "gre")
        if not res.success:
            return Verdict(f.id, GENERATION_FAILED, "non-reproducible: retry budget exhausted",
                           gre_attempts=res.attempts_used)
        v = run_dv(nf, res.draft, bundle, ws, cfg.engine, self.llm, self._exec, fdir / "attempts" / "dv")
        v.gre_attempts = res.attempts_used
        return v

    def findings(self) -> list[Finding]:
        corpus = load_findings(self.config.findings, self.config.format)
        return list(corpus.high_only() if self.config.high_only else corpus)

    def run(self) -> RunReport:
        cfg = self.config
        findings = self.findings()
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / "config.json").write_text(json.dumps(cfg.echo(), indent=2, sort_keys=True), encoding="utf-8")
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            verdicts = list(pool.map(self.process, findings))
        self.ledger.write(cfg.out / "ledger.json")
        return emit_report(findings, verdicts, aggregate_costs(verdicts), cfg.out, cfg.echo())


def validate(config: RunConfig) -> RunReport:
    return Pipeline(config).run()


def slice_findings(config: RunConfig) -> dict[str, BugContextBundle]:
    """Run ingestion and BCE only; bundles land in out/<id>/bundle."""
    pipe = Pipeline(config, executor=False)
    out: dict[str, BugContextBundle] = {}
    for f in pipe.findings():
        root, model = pipe._model(f)
        _, out[f.id] = pipe._bundle(f, root, model)
    return out


def load_verdicts(out_dir: Path | str) -> list[tuple[Finding, Verdict]]:
    out_dir = Path(out_dir)
    records = sorted(out_dir.glob(f"*/{VERDICT_FILE}")) if out_dir.is_dir() else []
    if not records:
        raise StageOrderError(f"no verdict records under {out_dir}; run validate first")
    pairs = []
    for p in records:
        data = json.loads(p.read_text(encoding="utf-8"))
        if "finding" not in data:
            raise StageOrderError(f"{p} lacks the finding record")
        pairs.append((finding_from_record(data["finding"]), Verdict.from_json(data)))
    return pairs


def report(out_dir: Path | str, write_to: Path | str | None = None) -> RunReport:
    """Rebuild the run report from stored verdict records only."""
    pairs = load_verdicts(out_dir)
    findings = [f for f, _ in pairs]
    verdicts = [v for _, v in pairs]
    cfg_path = Path(out_dir) / "config.json"
    config = json.loads(cfg_path.read_text(encoding="utf-8")) if cfg_path.is_file() else {}
    return emit_report(findings, verdicts, aggregate_costs(verdicts), write_to or out_dir, config)
