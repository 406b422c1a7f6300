import csv
import json
import subprocess
import sys

import pytest

from conftest import FIXTURES
from strategies import random_corpus
from routereceipt.cli import EXIT_FAIL, EXIT_IO, EXIT_OK, EXIT_USAGE, main
from routereceipt.receipt import export_schema, validate_document

NORTHSTAR = FIXTURES / "northstar"
SCENARIOS = FIXTURES / "scenarios"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def corpus_file(tmp_path):
    path = tmp_path / "corpus.jsonl"
    path.write_text("".join(json.dumps(d) + "\n" for d in random_corpus(21, 120)))
    return path


def test_validate_exit_codes(capsys, tmp_path):
    assert run(capsys, "validate", NORTHSTAR / "receipt.json")[0] == EXIT_OK
    code, out, _ = run(capsys, "validate", NORTHSTAR / "broken.json")
    assert code == EXIT_FAIL and "missing_required at /redactions" in out
    assert run(capsys, "validate", tmp_path / "missing.json")[0] == EXIT_IO
    assert run(capsys, "frobnicate")[0] == EXIT_USAGE
    assert run(capsys, "validate")[0] == EXIT_USAGE


def test_json_output_is_byte_stable(capsys):
    first = run(capsys, "validate", "--json", NORTHSTAR / "broken.json")[1]
    second = run(capsys, "validate", "--json", NORTHSTAR / "broken.json")[1]
    assert first == second
    assert json.loads(first)["errors"][0] == {
        "path": "/redactions", "kind": "missing_required", "detail": json.loads(first)["errors"][0]["detail"]}


def test_view_audiences(capsys, tmp_path):
    doc = json.loads((NORTHSTAR / "receipt.json").read_text())
    doc["provider_chain"] = [{"role": "served", "provider": "p", "model": "m"}]
    path = tmp_path / "r.json"
    path.write_text(json.dumps(doc))
    code, out, _ = run(capsys, "view", "--json", "--audience", "end_user", path)
    assert code == EXIT_OK
    public = json.loads(out)
    assert "provider_chain" not in public and validate_document(public).valid
    code, out, _ = run(capsys, "view", "--json", "--audience", "auditor", path)
    assert json.loads(out)["provider_chain"] == doc["provider_chain"]
    code, out, _ = run(capsys, "view", "--audience", "end_user", "--previous-model", "contract-pro-2026-03-02", path)
    assert "labels: model updated since previous answer" in out
    assert run(capsys, "view", "--audience", "root", path)[0] == EXIT_USAGE


def test_normalize(capsys):
    code, out, _ = run(capsys, "normalize", "--json", "--surface", "openai_priority",
                       FIXTURES / "surfaces" / "openai_priority.json")
    assert code == EXIT_OK
    assert json.loads(out)[0]["service_tier"]["change_reason"] == "capacity"
    code, out, _ = run(capsys, "normalize", "--json", "--surface", "openai_priority",
                       "--envelope", NORTHSTAR / "envelope.json", FIXTURES / "surfaces" / "openai_priority.json")
    assert code == EXIT_OK and validate_document(out).valid


def test_eval(capsys, corpus_file):
    code, out, _ = run(capsys, "eval", "--json", "--policy", NORTHSTAR / "policy.json", NORTHSTAR / "receipt.json")
    assert code == EXIT_FAIL
    assert [v["code"] for v in json.loads(out)["results"][0]["violations"]] == ["model_drift"]
    code, out, _ = run(capsys, "eval", "--json", "--policy", NORTHSTAR / "policy.json", corpus_file)
    assert len(json.loads(out)["results"]) == 120
    assert run(capsys, "eval", "--policy", NORTHSTAR / "receipt.json", corpus_file)[0] == EXIT_USAGE


def test_ingest_aggregate_export_purge(capsys, tmp_path, corpus_file, monkeypatch):
    store = tmp_path / "store"
    code, out, _ = run(capsys, "ingest", "--json", store, corpus_file)
    assert code == EXIT_OK and len(json.loads(out)["stored"]) == 120
    code, out, _ = run(capsys, "ingest", "--json", store, corpus_file)
    assert code == EXIT_FAIL and {r["reason"] for r in json.loads(out)["rejected"]} == {"duplicate"}

    monkeypatch.setenv("RR_STORE_PATH", str(store))
    code, out, _ = run(capsys, "aggregate", "--json", "--metric", "fallback_rate",
                       "--from", "2026-01-01T00:00:00Z", "--to", "2026-02-01T00:00:00Z")
    report = json.loads(out)
    assert code == EXIT_OK and report["denominator"] == 120
    expected = sum(d["fallback"]["status"] == "occurred" for d in random_corpus(21, 120)) / 120
    assert report["value"] == pytest.approx(expected)

    exported = tmp_path / "export.jsonl"
    assert run(capsys, "export", "--out", exported)[0] == EXIT_OK
    again = tmp_path / "again"
    assert run(capsys, "ingest", again, exported)[0] == EXIT_OK
    assert run(capsys, "export", "--out", tmp_path / "export2.jsonl", again)[0] == EXIT_OK
    assert (tmp_path / "export2.jsonl").read_bytes() == exported.read_bytes()

    code, out, _ = run(capsys, "export", "--audience", "end_user")
    assert all(validate_document(line).valid for line in out.splitlines())

    code, out, _ = run(capsys, "purge", "--json", "--now", "2026-06-01T00:00:00Z")
    purged = json.loads(out)["purged"]
    assert code == EXIT_OK and purged
    assert json.loads(run(capsys, "purge", "--json", "--now", "2026-06-01T00:00:00Z")[1])["purged"] == []


def test_aggregate_without_store(capsys, monkeypatch, tmp_path):
    monkeypatch.delenv("RR_STORE_PATH", raising=False)
    assert run(capsys, "aggregate", "--metric", "fallback_rate")[0] == EXIT_USAGE
    assert run(capsys, "aggregate", "--metric", "fallback_rate", tmp_path / "nope")[0] == EXIT_IO


def test_probe_alias_drift(capsys):
    code, out, _ = run(capsys, "probe", "alias-drift", "--json", "--scenario", SCENARIOS / "alias_flips.json")
    assert code == EXIT_OK
    assert [e["request_index"] for e in json.loads(out)["events"]] == [30, 70]


def test_probe_fallback(capsys):
    code, out, _ = run(capsys, "probe", "fallback", "--json", "--scenario", SCENARIOS / "fallback_chain.json",
                       "--trigger", "rate_limit:0", "--trigger", "provider_error:3")
    assert code == EXIT_OK and json.loads(out)["summary"]["all_visible"] is True
    assert run(capsys, "probe", "fallback", "--scenario", SCENARIOS / "fallback_chain.json",
               "--trigger", "gremlins")[0] == EXIT_USAGE


def test_schema(capsys, tmp_path):
    assert run(capsys, "schema")[1] == export_schema()
    assert run(capsys, "schema", "--out", tmp_path / "s.json")[0] == EXIT_OK
    assert (tmp_path / "s.json").read_text() == export_schema()


def test_report_writes_tables_and_figures(capsys, tmp_path, corpus_file):
    store = tmp_path / "store"
    run(capsys, "ingest", store, corpus_file)
    out_dir = tmp_path / "report"
    code, out, _ = run(capsys, "report", "--json", "--out", out_dir, store)
    assert code == EXIT_OK
    files = json.loads(out)["files"]
    assert files == ["aggregates.csv", "resolutions.csv", "daily.csv", "rates.png", "resolved_models.png",
                     "daily_rates.png"]
    for name in files:
        assert (out_dir / name).stat().st_size > 0
    assert (out_dir / "rates.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    rows = list(csv.DictReader((out_dir / "aggregates.csv").open()))
    assert {r["metric"] for r in rows} == {"fallback_rate", "tier_change_rate", "safety_intervention_rate",
                                           "incomplete_rate"}
    resolutions = list(csv.DictReader((out_dir / "resolutions.csv").open()))
    docs = random_corpus(21, 120)
    assert sum(int(r["count"]) for r in resolutions) == sum("resolved_model" in d for d in docs)
    first = {n: (out_dir / n).read_bytes() for n in files}
    run(capsys, "report", "--out", out_dir, store)
    assert {n: (out_dir / n).read_bytes() for n in files} == first


def test_console_entry_point():
    result = subprocess.run([sys.executable, "-m", "routereceipt.cli", "validate", str(NORTHSTAR / "receipt.json")],
                            capture_output=True, text=True)
    assert result.returncode == 0 and "valid" in result.stdout
