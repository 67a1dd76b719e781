import json

import pytest

from pocval.cli import main
from pocval.dv import GENERATION_FAILED, NOT_VALIDATED, VALIDATED
from pocval.errors import ConfigurationError, StageOrderError
from pocval.harness import FakeExecutor
from pocval.pipeline import RunConfig, report, slice_findings, validate

from conftest import FIXTURES, PROJECTS, gateway

GOLDEN = {
    "nft-vuln": VALIDATED, "nft-fixed": NOT_VALIDATED, "priv-vuln": VALIDATED, "priv-fixed": NOT_VALIDATED,
    "wallet-vuln": VALIDATED, "wallet-fixed": NOT_VALIDATED,
}


def cfg(tmp_path, findings="findings.jsonl", workers=4, **kw):
    kw.setdefault("llm", gateway())
    kw.setdefault("executor", FakeExecutor.from_file(FIXTURES / "executor.json"))
    return RunConfig(findings=FIXTURES / findings, project=PROJECTS, out=tmp_path / "out", workers=workers, **kw)


@pytest.fixture(scope="module")
def golden(tmp_path_factory):
    c = cfg(tmp_path_factory.mktemp("golden"))
    return c, validate(c)


def test_golden_decisions(golden):
    _, rep = golden
    assert rep.decisions == GOLDEN
    assert rep.metrics["accuracy"] == 1.0 and rep.metrics["counts"]["FP"] == 0


def test_golden_artifacts(golden):
    c, _ = golden
    out = c.out
    for fid in GOLDEN:
        assert (out / fid / "bundle" / "manifest.json").is_file()
        assert (out / fid / "workspace" / "foundry.toml").is_file()
        assert (out / fid / "attempts" / "gre" / "0" / "draft.sol").is_file()
    # nft-vuln compiled only after one repair; wallet-vuln instrumented only after one precheck repair
    v = json.loads((out / "nft-vuln" / "verdict.json").read_text())
    assert v["attempts"] == {"gre": 2, "dv_insert": 1} and v["finding"]["id"] == "nft-vuln"
    w = json.loads((out / "wallet-vuln" / "verdict.json").read_text())
    assert w["attempts"]["dv_insert"] == 2
    assert "pragma experimental ABIEncoderV2;" in (out / "wallet-vuln" / "workspace" / "test" / "PoC.t.sol").read_text()
    assert json.loads((out / "config.json").read_text())["workers"] == 4
    assert "medium" not in {p.name for p in out.iterdir()}
    assert not (PROJECTS / "nft_vuln" / "test").exists()


def test_stage_order_from_ledger(golden):
    c, _ = golden
    ledger = c.llm.ledger
    for fid in GOLDEN:
        seen = ledger.first_seen(fid)
        bce = max(t for s, t in seen.items() if s.startswith("bce-"))
        gre = [t for s, t in seen.items() if s.startswith("gre-")]
        dv = [t for s, t in seen.items() if s.startswith("dv-")]
        assert bce < min(gre) and max(gre) < min(dv)
        assert seen["parse"] < bce


def test_costs_in_report(golden):
    c, rep = golden
    total = rep.costs["__all__"]["total"]
    assert total["calls"] == c.llm.ledger.totals().calls and total["input_tokens"] > 0
    assert set(rep.costs["__all__"]["stages"]) >= {"bce-keys", "gre-generate", "dv-verify", "forge-build", "parse"}


def test_report_is_pure_over_stored_verdicts(golden, tmp_path):
    c, rep = golden
    again = report(c.out, write_to=tmp_path)
    assert again.to_json() == rep.to_json()
    assert (tmp_path / "report.json").read_text() == (c.out / "report.json").read_text()


def test_report_on_empty_dir(tmp_path):
    with pytest.raises(StageOrderError):
        report(tmp_path)
    assert main(["report", str(tmp_path)]) == 1


def test_budget_row_isolated(tmp_path):
    rep = validate(cfg(tmp_path, "findings_budget.jsonl"))
    assert rep.decisions == {**GOLDEN, "gf-1": GENERATION_FAILED}
    gf = json.loads((tmp_path / "out" / "gf-1" / "verdict.json").read_text())
    assert gf["attempts"]["gre"] == 5
    assert gf["costs"]["stages"]["gre-generate"]["calls"] + gf["costs"]["stages"]["gre-repair"]["calls"] == 5


def test_fault_isolation(tmp_path):
    rep = validate(cfg(tmp_path, "findings_fault.jsonl"))
    rows = {r["finding_id"]: r for r in rep.rows}
    assert rows["crash-1"]["status"] == "error" and rows["crash-1"]["decision"] == NOT_VALIDATED
    assert "injected executor fault" in rows["crash-1"]["reason"]
    assert {k: v for k, v in rep.decisions.items() if k != "crash-1"} == GOLDEN


@pytest.mark.parametrize("workers", [1, 2, 3])
def test_in_flight_findings_bounded(tmp_path, workers):
    ex = FakeExecutor.from_file(FIXTURES / "executor.json")
    for runs in ex.runs.values():
        for r in runs:
            r.delay = 0.01
    rep = validate(cfg(tmp_path, workers=workers, executor=ex))
    assert rep.decisions == GOLDEN
    assert 1 <= ex.peak_active_findings <= workers


def test_resume_skips_existing(tmp_path):
    validate(cfg(tmp_path))
    llm = gateway([])  # any LLM call would fail
    rep = validate(cfg(tmp_path, llm=llm, executor=FakeExecutor(), resume=True))
    assert rep.decisions == GOLDEN and llm.ledger.entries == []


def test_unresolvable_location_rejected(tmp_path):
    p = tmp_path / "f.jsonl"
    p.write_text(json.dumps({"id": "bad", "severity": "High", "narrative": "x", "locations": ["drainAll"],
                             "project_ref": "nft_vuln", "label": False}) + "\n")
    c = cfg(tmp_path)
    c.findings = p
    rep = validate(c)
    assert rep.rows[0]["status"] == "rejected" and rep.decisions == {"bad": NOT_VALIDATED}


def test_zero_findings(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    c = cfg(tmp_path)
    c.findings = p
    rep = validate(c)
    assert rep.rows == [] and rep.metrics is None
    assert (tmp_path / "out" / "report.json").is_file()


def test_config_checks(tmp_path):
    with pytest.raises(ConfigurationError):
        validate(cfg(tmp_path, workers=0))
    with pytest.raises(ConfigurationError):
        validate(RunConfig(findings=FIXTURES / "findings.jsonl", project=PROJECTS, out=tmp_path))


def test_slice_manifest(tmp_path):
    bundles = slice_findings(cfg(tmp_path))
    assert set(bundles) == set(GOLDEN)
    m = json.loads((tmp_path / "out" / "priv-vuln" / "bundle" / "manifest.json").read_text())
    assert [(s["name"], s["distance"]) for s in m["slice"]] == [
        ("Treasury.grantAdmin", 0), ("Treasury.onlyAdmin", 0), ("Treasury.revokeAdmin", 0),
        ("Treasury.setTreasury", 0), ("Treasury._grantAdmin", 1)]
    assert m["constructors_and_initializers"] == ["Treasury.constructor"]
    assert m["build_metadata"]["compiler_version"] == "0.8.13"
    assert not (tmp_path / "out" / "priv-vuln" / "workspace").exists()


# --- CLI ------------------------------------------------------------------------------

def cli_args(tmp_path, *extra, findings="findings.jsonl"):
    return ["validate", "--findings", str(FIXTURES / findings), "--project", str(PROJECTS),
            "--transcript", str(FIXTURES / "transcript.jsonl"), "--fake-executor", str(FIXTURES / "executor.json"),
            "--out", str(tmp_path / "cli"), *extra]


def test_cli_golden_and_report(tmp_path, capsys):
    assert main(cli_args(tmp_path, "--workers", "2")) == 0
    out = capsys.readouterr().out
    assert "accuracy 100.00% (6/6)" in out
    assert main(["report", str(tmp_path / "cli"), "--json"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert {r["finding_id"]: r["decision"] for r in data["rows"]} == GOLDEN


def test_cli_exit_codes(tmp_path, monkeypatch):
    monkeypatch.delenv("POCVAL_LLM_BASE_URL", raising=False)
    assert main(cli_args(tmp_path, "--workers", "0")) == 2
    assert main(["validate", "--findings", str(FIXTURES / "findings.jsonl"), "--project", str(PROJECTS),
                 "--out", str(tmp_path)]) == 2
    # no forge on PATH: the real executor aborts before any finding runs
    monkeypatch.setenv("PATH", str(tmp_path))
    assert main(["validate", "--findings", str(FIXTURES / "findings.jsonl"), "--project", str(PROJECTS),
                 "--transcript", str(FIXTURES / "transcript.jsonl"), "--out", str(tmp_path / "x")]) == 3
    assert not (tmp_path / "x").exists()


def test_cli_slice(tmp_path, capsys):
    args = ["slice", "--findings", str(FIXTURES / "findings.jsonl"), "--project", str(PROJECTS),
            "--transcript", str(FIXTURES / "transcript.jsonl"), "--out", str(tmp_path / "s")]
    assert main(args) == 0
    assert "priv-vuln: 5 definitions" in capsys.readouterr().out
