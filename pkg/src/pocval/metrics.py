"""Confusion-matrix metrics and run reports.

A Validated verdict is a positive prediction. Everything else (including
GenerationFailed and errored rows) is negative.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .dv import Verdict
from .errors import ReportError, UndefinedMetricError
from .findings import Finding


@dataclass(frozen=True)
class MetricCounts:
    TP: int = 0
    TN: int = 0
    FP: int = 0
    FN: int = 0

    def __post_init__(self) -> None:
        if min(self.TP, self.TN, self.FP, self.FN) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.TP + self.TN + self.FP + self.FN

    @property
    def correct(self) -> int:
        return self.TP + self.TN

    def __add__(self, other: "MetricCounts") -> "MetricCounts":
        return MetricCounts(self.TP + other.TP, self.TN + other.TN, self.FP + other.FP, self.FN + other.FN)


def accuracy(c: MetricCounts) -> float:
    if c.total == 0:
        raise UndefinedMetricError("accuracy is undefined for zero findings")
    return c.correct / c.total


def ppv(c: MetricCounts) -> float:
    if c.TP + c.FP == 0:
        raise UndefinedMetricError("PPV is undefined with no positive predictions")
    return c.TP / (c.TP + c.FP)


def npv(c: MetricCounts) -> float:
    if c.TN + c.FN == 0:
        raise UndefinedMetricError("NPV is undefined with no negative predictions")
    return c.TN / (c.TN + c.FN)


def ppv_npv(c: MetricCounts) -> tuple[float | None, float | None]:
    """(PPV, NPV); a side with a zero denominator is None."""
    out = []
    for fn in (ppv, npv):
        try:
            out.append(fn(c))
        except UndefinedMetricError:
            out.append(None)
    return out[0], out[1]


def classify(label: bool, verdict: Verdict) -> str:
    pred = verdict.positive
    if label:
        return "TP" if pred else "FN"
    return "FP" if pred else "TN"


def counts_from_pairs(pairs: Iterable[tuple[bool, Verdict]]) -> MetricCounts:
    tally = {"TP": 0, "TN": 0, "FP": 0, "FN": 0}
    for label, v in pairs:
        tally[classify(label, v)] += 1
    return MetricCounts(**tally)


def pct(x: float | None) -> str:
    return "n/a" if x is None else f"{100 * x:.2f}%"


def _safe(fn, c: MetricCounts) -> float | None:
    try:
        return fn(c)
    except UndefinedMetricError:
        return None


def _metrics_json(c: MetricCounts) -> dict:
    p, n = ppv_npv(c)
    return {
        "counts": {"TP": c.TP, "TN": c.TN, "FP": c.FP, "FN": c.FN, "total": c.total},
        "accuracy": _safe(accuracy, c),
        "ppv": p,
        "npv": n,
    }


@dataclass
class RunReport:
    rows: list[dict]
    metrics: dict | None
    by_type: dict[str, dict] = field(default_factory=dict)
    costs: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def decisions(self) -> dict[str, str]:
        return {r["finding_id"]: r["decision"] for r in self.rows}

    def to_json(self) -> dict:
        return {
            "rows": self.rows,
            "metrics": self.metrics,
            "by_type": self.by_type,
            "costs": self.costs,
            "config": self.config,
        }

    def summary(self) -> str:
        lines = [f"findings: {len(self.rows)}"]
        tally: dict[str, int] = {}
        for r in self.rows:
            tally[r["decision"]] = tally.get(r["decision"], 0) + 1
        lines.append("decisions: " + (", ".join(f"{k}={v}" for k, v in sorted(tally.items())) or "none"))
        if self.metrics:
            c = self.metrics["counts"]
            lines.append(f"TP={c['TP']} TN={c['TN']} FP={c['FP']} FN={c['FN']}")
            lines.append(
                f"accuracy {pct(self.metrics['accuracy'])} ({c['TP'] + c['TN']}/{c['total']}), "
                f"PPV {pct(self.metrics['ppv'])}, NPV {pct(self.metrics['npv'])}"
            )
        if self.by_type:
            lines.append("")
            lines.append(f"{'type':<28} {'n':>4} {'correct':>8} {'accuracy':>9}")
            for t, m in sorted(self.by_type.items()):
                c = m["counts"]
                lines.append(f"{t:<28} {c['total']:>4} {c['TP'] + c['TN']:>8} {pct(m['accuracy']):>9}")
        total = self.costs.get("__all__", {}).get("total") if self.costs else None
        if total:
            lines.append("")
            lines.append(
                f"cost: {total['input_tokens']} input + {total['output_tokens']} output tokens, "
                f"{total['calls']} LLM calls, {total['seconds']:.2f} s"
            )
            n = max(len(self.rows), 1)
            lines.append(
                f"per finding: {(total['input_tokens'] + total['output_tokens']) / n:.1f} tokens, "
                f"{total['seconds'] / n:.2f} s"
            )
            for stage, sc in sorted(self.costs["__all__"]["stages"].items()):
                lines.append(
                    f"  {stage:<13} in={sc['input_tokens']:>8} out={sc['output_tokens']:>8} "
                    f"calls={sc['calls']:>4} {sc['seconds']:>8.2f} s"
                )
        return "\n".join(lines)


def build_report(findings: Sequence[Finding], verdicts: Sequence[Verdict], costs: dict | None = None,
                 config: dict | None = None) -> RunReport:
    """Pure aggregation. Metrics are computed only when every finding has a label."""
    if len(findings) != len(verdicts):
        raise ReportError(f"{len(findings)} findings but {len(verdicts)} verdicts")
    by_id = {v.finding_id: v for v in verdicts}
    if len(by_id) != len(verdicts) or set(by_id) != {f.id for f in findings}:
        raise ReportError("verdict ids do not match finding ids")
    labeled = bool(findings) and all(f.label is not None for f in findings)
    rows = []
    for f in sorted(findings, key=lambda x: x.id):
        v = by_id[f.id]
        row = {
            "finding_id": f.id,
            "project": f.project_ref,
            "vuln_type": f.vuln_type or "",
            "decision": v.decision,
            "status": v.status,
            "reason": v.reason,
            "deltas": len(v.deltas),
            "label": f.label,
        }
        if labeled:
            row["outcome"] = classify(bool(f.label), v)
        rows.append(row)

    metrics = None
    by_type: dict[str, dict] = {}
    if labeled:
        overall = counts_from_pairs((bool(f.label), by_id[f.id]) for f in findings)
        metrics = _metrics_json(overall)
        groups: dict[str, list[Finding]] = {}
        for f in findings:
            if f.vuln_type:
                groups.setdefault(f.vuln_type, []).append(f)
        for t, fs in groups.items():
            by_type[t] = _metrics_json(counts_from_pairs((bool(f.label), by_id[f.id]) for f in fs))
    return RunReport(rows, metrics, by_type, costs or {}, config or {})


def emit_report(findings: Sequence[Finding], verdicts: Sequence[Verdict], costs: dict | None,
                out: Path | str, config: dict | None = None) -> RunReport:
    """Write ``report.json`` and ``summary.txt`` under ``out``."""
    report = build_report(findings, verdicts, costs, config)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True), encoding="utf-8")
    (out / "summary.txt").write_text(report.summary() + "\n", encoding="utf-8")
    return report
