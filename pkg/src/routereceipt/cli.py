"""``rr``: command-line front door.

Exit codes: 0 success and clean result, 1 validation failure or policy
violation, 2 usage error, 3 input/output error.  ``--json`` output is
canonical JSON and byte-stable for identical inputs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path
from typing import Any, Iterable, Sequence

from routereceipt.gateway.config import GatewayConfig
from routereceipt.gateway.service import ProbeError, run_alias_drift_probe, run_fallback_probe
from routereceipt.gateway.simulator import FAILURE_KINDS, Failure, ScenarioError, SimScenario
from routereceipt.normalize import (
    SURFACES,
    Envelope,
    ExtractionError,
    MergeError,
    canonical_fragment,
    extract_fragment,
    merge,
)
from routereceipt.policy import ConstraintPolicy, ConstraintPolicyError, evaluate
from routereceipt.receipt import (
    AUDIENCES,
    InvalidReceiptError,
    ValidationReport,
    canonical_json,
    export_schema,
    parse_receipt,
    validate_document,
)
from routereceipt.redact import DEFAULT_POLICY, PolicyError, RedactionPolicy, end_user_labels, view_for
from routereceipt.store import (
    METRICS,
    DuplicateReceiptError,
    ReceiptFilter,
    ReceiptStore,
    RetentionRule,
    compute_aggregate,
)

logger = logging.getLogger("routereceipt.cli")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _emit(args, machine: Any, human: str | None = None) -> None:
    if args.json or human is None:
        sys.stdout.write(canonical_json(machine) + "\n")
    else:
        sys.stdout.write(human.rstrip("\n") + "\n")


def _read_text(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    return Path(path).read_text("utf-8")


def _load_json(path: str, what: str) -> Any:
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc}") from None


def _documents(text: str) -> list[str]:
    """A single JSON document, or one per non-blank line for JSONL."""
    try:
        json.loads(text)
        return [text]
    except json.JSONDecodeError:
        return [line for line in text.splitlines() if line.strip()]


def _redaction_policy(path: str | None) -> RedactionPolicy:
    if path is None:
        return DEFAULT_POLICY
    try:
        return RedactionPolicy.from_json(_load_json(path, "policy"))
    except PolicyError as exc:
        raise UsageError(f"bad redaction policy: {exc}") from None


def _store_path(arg: str | None) -> str:
    path = arg or os.environ.get("RR_STORE_PATH")
    if not path:
        raise UsageError("no store given; pass STORE or set RR_STORE_PATH")
    return path


def _open_store(arg: str | None, *, must_exist: bool) -> ReceiptStore:
    path = _store_path(arg)
    if must_exist and not Path(path).is_dir():
        raise FileNotFoundError(f"store directory {path} does not exist")
    return ReceiptStore(path)


def _filter(args) -> ReceiptFilter:
    try:
        return ReceiptFilter(start=getattr(args, "from_", None), end=getattr(args, "to", None),
                             requested_model=getattr(args, "requested_model", None))
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _report_lines(report: ValidationReport) -> list[str]:
    lines = [f"  error {e.kind} at {e.path or '/'}: {e.detail}" for e in report.errors]
    lines += [f"  warning {w.code} at {w.path}: {w.detail}" for w in report.warnings]
    return lines


# --------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    report = validate_document(_read_text(args.file))
    head = "valid" if report.valid else f"invalid: {len(report.errors)} error(s)"
    _emit(args, report.to_json(), "\n".join([f"{args.file}: {head}", *_report_lines(report)]))
    return EXIT_OK if report.valid else EXIT_FAIL


def cmd_view(args) -> int:
    text = _read_text(args.file)
    report = validate_document(text)
    if not report.valid:
        _emit(args, report.to_json(), "\n".join([f"{args.file}: invalid", *_report_lines(report)]))
        return EXIT_FAIL
    view = view_for(parse_receipt(text), args.audience, _redaction_policy(args.policy))
    doc = view.receipt.to_json()
    if args.json:
        _emit(args, doc)
        return EXIT_OK
    lines = [json.dumps(doc, indent=2, ensure_ascii=False)]
    if args.audience == "end_user":
        labels = end_user_labels(view.receipt, args.previous_model, args.fast_tier)
        shown = [label.text for label in labels if label.present]
        lines.append("labels: " + ("; ".join(shown) if shown else "(none)"))
    _emit(args, doc, "\n".join(lines))
    return EXIT_OK


def cmd_normalize(args) -> int:
    fragments = []
    for path in args.raw:
        raw = _load_json(path, "raw metadata")
        try:
            fragments.append(extract_fragment(args.surface, raw))
        except ExtractionError as exc:
            _emit(args, {"error": "extraction", "file": path, "detail": str(exc)}, f"{path}: {exc}")
            return EXIT_FAIL
    if args.envelope is None:
        machine = [json.loads(canonical_fragment(f)) for f in fragments]
        _emit(args, machine, "\n".join(canonical_fragment(f) for f in fragments))
        return EXIT_OK
    try:
        envelope = Envelope.from_json(_load_json(args.envelope, "envelope"))
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad envelope: {exc}") from None
    try:
        result = merge(envelope, fragments)
    except MergeError as exc:
        _emit(args, {"error": "merge_conflict", "path": exc.path, "left": exc.left, "right": exc.right},
              f"merge conflict at {exc.path}: {exc.left!r} vs {exc.right!r}")
        return EXIT_FAIL
    doc = result.receipt.to_json()
    human = json.dumps(doc, indent=2, ensure_ascii=False)
    for w in result.warnings:
        human += f"\nwarning {w.code} at {w.path}: {w.detail}"
    _emit(args, doc, human)
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        policy = ConstraintPolicy.from_json(_load_json(args.policy, "policy"))
    except (ConstraintPolicyError, TypeError) as exc:
        raise UsageError(f"bad constraint policy: {exc}") from None
    results, clean, human = [], True, []
    for n, doc in enumerate(_documents(_read_text(args.file)), 1):
        try:
            receipt = parse_receipt(doc)
        except InvalidReceiptError as exc:
            clean = False
            results.append({"line": n, "receipt_id": None, "invalid": exc.report.to_json()})
            human.append(f"#{n}: invalid receipt")
            human += _report_lines(exc.report)
            continue
        violations = evaluate(receipt, policy)
        clean = clean and not violations
        results.append({"line": n, "receipt_id": receipt.receipt_id,
                        "violations": [v.to_json() for v in violations]})
        human.append(f"{receipt.receipt_id}: " + ("ok" if not violations else f"{len(violations)} violation(s)"))
        human += [f"  {v.code} at {v.field_path}: expected {v.expected}, observed {v.observed}" for v in violations]
    _emit(args, {"results": results}, "\n".join(human))
    return EXIT_OK if clean else EXIT_FAIL


def cmd_aggregate(args) -> int:
    store = _open_store(args.store, must_exist=True)
    flt = _filter(args)
    report = store.aggregate(args.metric, flt.start, flt.end, args.requested_model)
    if isinstance(report.value, dict):
        body = "\n".join(f"  {k}: {v}" for k, v in report.value.items()) or "  (empty)"
        human = f"{args.metric} over {report.denominator} receipt(s)\n{body}"
    else:
        human = f"{args.metric} = {report.value:.6g} (n={report.denominator})"
    _emit(args, report.to_json(), human)
    return EXIT_OK


def _parse_trigger(text: str) -> Failure:
    kind, sep, index = text.partition(":")
    if not sep or kind not in FAILURE_KINDS or not index.isdigit():
        raise UsageError(f"trigger {text!r} must look like KIND:INDEX with KIND in {FAILURE_KINDS}")
    return Failure(request_index=int(index), kind=kind)


def cmd_probe(args) -> int:
    try:
        scenario = SimScenario.from_json(_load_json(args.scenario, "scenario"))
    except (ScenarioError, KeyError, TypeError) as exc:
        raise UsageError(f"bad scenario: {exc}") from None
    try:
        if args.probe == "alias-drift":
            report = run_alias_drift_probe(args.prompt or ["probe"], args.n, scenario, args.alias)
        else:
            report = run_fallback_probe([_parse_trigger(t) for t in args.trigger], scenario, args.n)
    except ProbeError as exc:
        raise UsageError(str(exc)) from None
    lines = [f"{report.probe}: {len(report.events)} event(s)"]
    lines += [f"  #{e.request_index}: {canonical_json(e.detail)}" for e in report.events]
    lines += [f"  {k}: {v}" for k, v in report.summary.items()]
    _emit(args, report.to_json(), "\n".join(lines))
    if report.probe == "fallback_observability" and not report.summary["all_visible"]:
        return EXIT_FAIL
    return EXIT_OK


def cmd_schema(args) -> int:
    text = export_schema()
    if args.out:
        Path(args.out).write_text(text, "utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_serve(args) -> int:
    from routereceipt.gateway.app import serve

    config = GatewayConfig.load(args.config)
    if args.host:
        config = replace(config, host=args.host)
    if args.port:
        config = replace(config, port=args.port)
    serve(config)
    return EXIT_OK


def cmd_ingest(args) -> int:
    store = _open_store(args.store, must_exist=False)
    stored, rejected = [], []
    for path in args.files:
        for n, doc in enumerate(_documents(_read_text(path)), 1):
            try:
                store.append(doc)
                stored.append(json.loads(doc)["receipt_id"])
            except InvalidReceiptError as exc:
                rejected.append({"file": path, "line": n, "reason": "invalid", "report": exc.report.to_json()})
            except DuplicateReceiptError as exc:
                rejected.append({"file": path, "line": n, "reason": "duplicate", "receipt_id": exc.receipt_id})
    human = [f"stored {len(stored)}, rejected {len(rejected)}"]
    human += [f"  {r['file']}#{r['line']}: {r['reason']}" for r in rejected]
    _emit(args, {"stored": stored, "rejected": rejected}, "\n".join(human))
    return EXIT_OK if not rejected else EXIT_FAIL


def cmd_export(args) -> int:
    store = _open_store(args.store, must_exist=True)
    policy = _redaction_policy(args.policy) if args.audience != "auditor" or args.policy else RedactionPolicy()
    lines = store.export_jsonl(_filter(args), args.audience, policy)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
    else:
        for line in lines:
            sys.stdout.write(line + "\n")
    return EXIT_OK


def _retention_rules(config_path: str | None) -> RetentionRule:
    try:
        config = GatewayConfig.load(config_path)
        return RetentionRule.from_env(base=RetentionRule.from_json(config.retention))
    except ValueError as exc:
        raise UsageError(f"bad retention settings: {exc}") from None


def cmd_purge(args) -> int:
    store = _open_store(args.store, must_exist=True)
    report = store.enforce_retention(_retention_rules(args.config), args.now)
    human = f"purged {len(report.purged)} receipt(s) at {report.now}"
    if report.purged:
        human += "\n" + "\n".join(f"  {rid}" for rid in report.purged)
    _emit(args, report.to_json(), human)
    return EXIT_OK


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def cmd_report(args) -> int:
    from routereceipt import plotting

    store = _open_store(args.store, must_exist=True)
    receipts = store.select(_filter(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    totals = {m: compute_aggregate(m, receipts) for m in METRICS}
    rates = {m: v for m, (v, _) in totals.items() if m != "alias_resolution_histogram"}
    denominators = {m: d for m, (_, d) in totals.items()}
    histogram = totals["alias_resolution_histogram"][0]

    by_day: dict[str, list] = {}
    for r in receipts:
        by_day.setdefault(r.served_at[:10], []).append(r)
    days = sorted(by_day)
    daily = {m: [compute_aggregate(m, by_day[d])[0] for d in days] for m in ("fallback_rate", "tier_change_rate")}
    pairs = Counter((r.requested_model or "", r.resolved_model) for r in receipts if r.resolved_model)

    files = [
        _write_csv(out / "aggregates.csv", ("metric", "value", "denominator"),
                   ((m, f"{v:.6f}", denominators[m]) for m, v in rates.items())),
        _write_csv(out / "resolutions.csv", ("requested_model", "resolved_model", "count"),
                   ((req, res, n) for (req, res), n in sorted(pairs.items()))),
        _write_csv(out / "daily.csv", ("date", "receipts", "fallback_rate", "tier_change_rate"),
                   ((d, len(by_day[d]), f"{daily['fallback_rate'][i]:.6f}", f"{daily['tier_change_rate'][i]:.6f}")
                    for i, d in enumerate(days))),
        plotting.rate_bars(rates, denominators, out / "rates.png"),
        plotting.histogram_bars(histogram, out / "resolved_models.png"),
        plotting.rate_series(days, daily, out / "daily_rates.png"),
    ]
    manifest = {"receipts": len(receipts), "files": [p.name for p in files]}
    _emit(args, manifest, f"wrote {len(files)} file(s) to {out} from {len(receipts)} receipt(s)")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _window_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--from", dest="from_", metavar="T0", help="inclusive lower bound on served_at (RFC 3339, UTC)")
    p.add_argument("--to", metavar="T1", help="exclusive upper bound on served_at")
    p.add_argument("--requested-model", help="only receipts for this requested model")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="emit canonical machine JSON")
    common.add_argument("-v", "--verbose", action="store_true", help="log to stderr")

    parser = argparse.ArgumentParser(prog="rr", description="Route receipt tools.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("validate", parents=[common], help="validate a receipt document")
    p.add_argument("file", help="receipt JSON, or - for stdin")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("view", parents=[common], help="render a receipt for one audience")
    p.add_argument("--audience", required=True, choices=AUDIENCES)
    p.add_argument("--policy", help="redaction policy JSON (default: built-in policy)")
    p.add_argument("--previous-model", help="resolved model of the prior answer, for the model-updated label")
    p.add_argument("--fast-tier", action="append", default=[], help="service tier counted as fast mode")
    p.add_argument("file")
    p.set_defaults(func=cmd_view)

    p = sub.add_parser("normalize", parents=[common], help="map raw provider metadata onto a receipt")
    p.add_argument("--surface", required=True, choices=SURFACES)
    p.add_argument("--envelope", help="envelope JSON; without it each fragment is printed")
    p.add_argument("raw", nargs="+")
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("eval", parents=[common], help="check receipts against a constraint policy")
    p.add_argument("--policy", required=True)
    p.add_argument("file", help="receipt JSON or JSONL")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("aggregate", parents=[common], help="compute a metric over a store")
    p.add_argument("--metric", required=True, choices=METRICS)
    _window_args(p)
    p.add_argument("store", nargs="?", help="store directory (default: $RR_STORE_PATH)")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("probe", parents=[common], help="run a route probe against the simulator")
    p.add_argument("probe", choices=("alias-drift", "fallback"))
    p.add_argument("--scenario", required=True)
    p.add_argument("--n", type=int, help="requests per prompt (alias-drift, default 100) or total (fallback)")
    p.add_argument("--prompt", action="append", help="alias-drift prompt; repeatable")
    p.add_argument("--alias", action="append", help="alias to probe; repeatable (default: all)")
    p.add_argument("--trigger", action="append", default=[], help="fallback trigger KIND:INDEX; repeatable")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("schema", parents=[common], help="print the receipt JSON Schema")
    p.add_argument("--out")
    p.set_defaults(func=cmd_schema)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP gateway")
    p.add_argument("--config", help="config JSON (default: $RR_CONFIG)")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("ingest", parents=[common], help="append receipts to a store")
    p.add_argument("store", help="store directory; created if missing")
    p.add_argument("files", nargs="+", help="receipt JSON or JSONL files")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("export", parents=[common], help="export a store as JSONL views")
    p.add_argument("--audience", default="auditor", choices=AUDIENCES)
    p.add_argument("--policy", help="redaction policy (default: none for auditor, built-in otherwise)")
    p.add_argument("--out")
    _window_args(p)
    p.add_argument("store", nargs="?")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("purge", parents=[common], help="enforce retention on a store")
    p.add_argument("--now", help="purge time (RFC 3339, UTC); default: current time")
    p.add_argument("--config", help="config JSON with a retention section")
    p.add_argument("store", nargs="?")
    p.set_defaults(func=cmd_purge)

    p = sub.add_parser("report", parents=[common], help="write CSV tables and PNG figures for a store")
    p.add_argument("--out", required=True, help="output directory")
    _window_args(p)
    p.add_argument("store", nargs="?")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if args.command == "probe" and args.n is None and args.probe == "alias-drift":
        args.n = 100
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"rr {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, UnicodeDecodeError) as exc:
        print(f"rr {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
