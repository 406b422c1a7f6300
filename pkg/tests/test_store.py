import json
import threading
from collections import Counter
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strategies import random_corpus
from routereceipt.receipt import InvalidReceiptError, canonical_serialize, parse_receipt, validate_document
from routereceipt.redact import DEFAULT_POLICY
from routereceipt.store import (
    METRICS,
    DuplicateReceiptError,
    ReceiptFilter,
    ReceiptNotFoundError,
    ReceiptPurgedError,
    ReceiptStore,
    RetentionRule,
    parse_duration,
)

T0 = datetime(2026, 1, 1, tzinfo=timezone.utc)


def at(doc, when, rid=None, **fields):
    out = dict(doc, served_at=when.strftime("%Y-%m-%dT%H:%M:%SZ"), **fields)
    if rid is not None:
        out["receipt_id"] = rid
    return out


def test_append_and_get_round_trip(golden_doc, tmp_path):
    store = ReceiptStore(tmp_path)
    assert store.append(golden_doc) == 0
    assert store.get_canonical("rr-northstar-0001") == canonical_serialize(parse_receipt(golden_doc))
    assert store.get("rr-northstar-0001").receipt == parse_receipt(golden_doc)
    assert "rr-northstar-0001" in store and len(store) == 1


def test_duplicate_id_rejected_and_store_unchanged(golden_doc, tmp_path):
    store = ReceiptStore(tmp_path)
    store.append(golden_doc)
    before = (tmp_path / "segments" / "0000.jsonl").read_bytes()
    with pytest.raises(DuplicateReceiptError, match="rr-northstar-0001"):
        store.append(dict(golden_doc, served_at="2026-06-16T00:00:00Z"))
    assert (tmp_path / "segments" / "0000.jsonl").read_bytes() == before
    assert store.get("rr-northstar-0001").receipt.served_at == golden_doc["served_at"]


def test_invalid_receipt_rejected(golden_doc):
    del golden_doc["redactions"]
    store = ReceiptStore()
    with pytest.raises(InvalidReceiptError):
        store.append(golden_doc)
    assert len(store) == 0


def test_unknown_id(golden_doc):
    with pytest.raises(ReceiptNotFoundError):
        ReceiptStore().get("rr-nope")


def test_store_survives_reload(tmp_path):
    corpus = random_corpus(3, 50)
    store = ReceiptStore(tmp_path, segment_size=16)
    for doc in corpus:
        store.append(doc)
    again = ReceiptStore(tmp_path, segment_size=16)
    assert again.query() == store.query()
    assert all(again.get_canonical(d["receipt_id"]) == store.get_canonical(d["receipt_id"]) for d in corpus)
    assert len(list((tmp_path / "segments").glob("*.jsonl"))) == 4
    assert again.append(dict(corpus[0], receipt_id="rr-after")) == 50


def test_lost_index_is_rebuilt(tmp_path):
    store = ReceiptStore(tmp_path)
    for doc in random_corpus(4, 10):
        store.append(doc)
    (tmp_path / "index.jsonl").unlink()
    again = ReceiptStore(tmp_path)
    assert again.query() == store.query()
    assert (tmp_path / "index.jsonl").exists()


def test_two_handles_see_each_others_appends(tmp_path):
    a, b = ReceiptStore(tmp_path), ReceiptStore(tmp_path)
    corpus = random_corpus(5, 4)
    a.append(corpus[0])
    b.append(corpus[1])
    with pytest.raises(DuplicateReceiptError):
        b.append(corpus[0])
    a.append(corpus[2])
    assert sorted(ReceiptStore(tmp_path).query()) == sorted(d["receipt_id"] for d in corpus[:3])


def test_concurrent_appends_lose_nothing(tmp_path):
    corpus = random_corpus(6, 400)
    stores = [ReceiptStore(tmp_path) for _ in range(4)]
    errors = []

    def worker(k):
        try:
            for doc in corpus[k::4]:
                stores[k].append(doc)
        except Exception as exc:  # pragma: no cover - surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert errors == []
    reloaded = ReceiptStore(tmp_path)
    assert len(reloaded) == 400
    positions = sorted(reloaded.position(d["receipt_id"]) for d in corpus)
    assert positions == list(range(400))


# --------------------------------------------------------------------------
# query and aggregate, checked against a brute-force oracle on raw documents


def _ts(text):
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc)


def oracle_query(docs, start=None, end=None, **eq):
    keep = []
    for d in docs:
        when = _ts(d["served_at"])
        if start is not None and when < start or end is not None and when >= end:
            continue
        got = {"requested_model": d.get("requested_model"), "fallback_status": d["fallback"]["status"],
               "region_class": d["region_class"], "completion_status": d["completion_status"],
               "retention_class": d.get("retention_class")}
        if all(v is None or got[k] == v for k, v in eq.items()):
            keep.append(d)
    keep.sort(key=lambda d: (d["served_at"], d["receipt_id"]))
    return keep


def oracle_aggregate(metric, docs):
    if metric == "alias_resolution_histogram":
        c = Counter(d["resolved_model"] for d in docs if "resolved_model" in d)
        return dict(c), sum(c.values())
    if metric == "tier_change_rate":
        pool = [d["service_tier"] for d in docs if "requested" in d.get("service_tier", {})]
        hits = [t["requested"] != t["effective"] for t in pool]
    else:
        pool = docs
        test = {"fallback_rate": lambda d: d["fallback"]["status"] == "occurred",
                "safety_intervention_rate": lambda d: d["safety"]["status"] == "intervened",
                "incomplete_rate": lambda d: d["completion_status"] != "complete"}[metric]
        hits = [test(d) for d in docs]
    return (sum(hits) / len(pool) if pool else 0.0), len(pool)


CORPUS = random_corpus(11, 600)
_STORE = ReceiptStore()
for _doc in CORPUS:
    _STORE.append(_doc)

days = st.integers(min_value=-2, max_value=32).map(lambda d: T0 + timedelta(days=d))
filters = st.fixed_dictionaries({}, optional={
    "start": days, "end": days,
    "requested_model": st.sampled_from(["contract-pro-latest", "contract-pro-2026-03-02", "m-a", "m-b"]),
    "fallback_status": st.sampled_from(["none", "occurred", "unknown", "redacted"]),
    "region_class": st.sampled_from(["global", "data_zone", "user_selected_region"]),
    "completion_status": st.sampled_from(["complete", "error", "length_limit"]),
    "retention_class": st.sampled_from(["ephemeral", "audit_hold", "unknown"]),
}).filter(lambda f: f.get("start") is None or f.get("end") is None or f["start"] <= f["end"])


@settings(max_examples=200)
@given(filters)
def test_query_matches_oracle(flt):
    expected = [d["receipt_id"] for d in oracle_query(CORPUS, **flt)]
    assert _STORE.query(ReceiptFilter(**flt)) == expected


@settings(max_examples=200)
@given(st.sampled_from(METRICS), days, days, st.none() | st.sampled_from(["contract-pro-latest", "m-a"]))
def test_aggregate_matches_oracle(metric, start, end, model):
    start, end = min(start, end), max(start, end)
    report = _STORE.aggregate(metric, start, end, requested_model=model)
    value, denom = oracle_aggregate(metric, oracle_query(CORPUS, start, end, requested_model=model))
    assert report.denominator == denom
    if isinstance(value, dict):
        assert report.value == value and list(report.value) == sorted(report.value)
    else:
        assert report.value == pytest.approx(value, abs=1e-12)


def test_window_is_half_open(golden_doc):
    store = ReceiptStore()
    store.append(at(golden_doc, T0, "rr-a"))
    store.append(at(golden_doc, T0 + timedelta(days=1), "rr-b"))
    assert store.query(ReceiptFilter(start=T0, end=T0 + timedelta(days=1))) == ["rr-a"]
    assert store.query(ReceiptFilter(start=T0 + timedelta(days=1))) == ["rr-b"]


def test_ties_break_on_receipt_id(golden_doc):
    store = ReceiptStore()
    for rid in ("rr-c", "rr-a", "rr-b"):
        store.append(at(golden_doc, T0, rid))
    assert store.query() == ["rr-a", "rr-b", "rr-c"]


def test_fallback_rate_three_in_ten(golden_doc):
    store = ReceiptStore()
    for i in range(10):
        fallback = {"status": "occurred"} if i < 3 else {"status": "none"}
        store.append(at(golden_doc, T0 + timedelta(hours=i), f"rr-{i}", fallback=fallback))
    report = store.aggregate("fallback_rate", T0, T0 + timedelta(days=1))
    assert (report.value, report.denominator) == (0.3, 10)


def test_alias_histogram_six_four(golden_doc):
    store = ReceiptStore()
    for i in range(10):
        resolved = "contract-pro-2026-03-02" if i < 6 else "contract-pro-2026-04-18"
        store.append(at(golden_doc, T0 + timedelta(hours=i), f"rr-{i}", resolved_model=resolved))
    report = store.aggregate("alias_resolution_histogram", requested_model="contract-pro-latest")
    assert report.value == {"contract-pro-2026-03-02": 6, "contract-pro-2026-04-18": 4}
    assert report.denominator == 10


def test_empty_window_is_zero(golden_doc):
    report = ReceiptStore().aggregate("fallback_rate")
    assert (report.value, report.denominator) == (0.0, 0)


def test_unknown_metric_rejected():
    with pytest.raises(ValueError, match="unknown metric"):
        ReceiptStore().aggregate("vibes")


def test_previous_resolution(golden_doc):
    store = ReceiptStore()
    store.append(at(golden_doc, T0, "rr-1", resolved_model="contract-pro-2026-03-02"))
    later = parse_receipt(at(golden_doc, T0 + timedelta(days=1), "rr-2"))
    store.append(later)
    assert store.previous_resolution(later) == "contract-pro-2026-03-02"
    assert store.previous_resolution(parse_receipt(at(golden_doc, T0, "rr-0"))) is None


# --------------------------------------------------------------------------
# retention


def test_retention_classes(golden_doc, tmp_path):
    store = ReceiptStore(tmp_path)
    old = T0 - timedelta(days=400)
    store.append(at(golden_doc, old, "rr-hold", retention_class="audit_hold"))
    store.append(at(golden_doc, old, "rr-reg", retention_class="regulated"))
    store.append(at(golden_doc, T0 - timedelta(days=100), "rr-std", retention_class="standard"))
    store.append(at(golden_doc, T0 - timedelta(days=100), "rr-none"))
    store.append(at(golden_doc, T0 - timedelta(days=100), "rr-unk", retention_class="unknown"))
    store.append(at(golden_doc, T0 - timedelta(days=80), "rr-std-young", retention_class="standard"))
    store.append(at(golden_doc, T0 - timedelta(hours=25), "rr-eph", retention_class="ephemeral"))
    store.append(at(golden_doc, T0 - timedelta(hours=23), "rr-eph-young", retention_class="ephemeral"))
    report = store.enforce_retention(now=T0)
    assert sorted(report.purged) == ["rr-eph", "rr-none", "rr-reg", "rr-std", "rr-unk"]
    assert store.query() == ["rr-hold", "rr-std-young", "rr-eph-young"]
    with pytest.raises(ReceiptPurgedError) as info:
        store.get("rr-std")
    assert info.value.tombstone.purged_at == "2026-01-01T00:00:00Z"
    with pytest.raises(DuplicateReceiptError):
        store.append(at(golden_doc, T0, "rr-std"))
    # idempotent
    assert store.enforce_retention(now=T0).purged == ()
    reloaded = ReceiptStore(tmp_path)
    assert reloaded.query() == store.query()
    assert reloaded.tombstone("rr-eph").retention_class == "ephemeral"
    assert '"rr-std"' not in (tmp_path / "segments" / "0000.jsonl").read_text()


def test_audit_hold_is_never_purged(golden_doc):
    store = ReceiptStore()
    store.append(at(golden_doc, T0 - timedelta(days=365 * 50), "rr-hold", retention_class="audit_hold"))
    tiny = RetentionRule(ephemeral=timedelta(seconds=1), standard=timedelta(seconds=1), regulated=timedelta(seconds=1))
    assert store.enforce_retention(tiny, now=T0).purged == ()


def test_purge_seen_by_other_handle(golden_doc, tmp_path):
    a, b = ReceiptStore(tmp_path), ReceiptStore(tmp_path)
    a.append(at(golden_doc, T0 - timedelta(days=100), "rr-old"))
    a.append(at(golden_doc, T0, "rr-new"))
    b.enforce_retention(now=T0)
    a.append(at(golden_doc, T0, "rr-newer"))
    assert a.query() == ["rr-new", "rr-newer"]


def test_retention_overrides():
    rule = RetentionRule.from_env({"RR_RETENTION_EPHEMERAL": "2h", "RR_RETENTION_STANDARD": "30d"})
    assert rule.ttl("ephemeral") == timedelta(hours=2)
    assert rule.ttl(None) == timedelta(days=30)
    assert rule.ttl("regulated") == timedelta(days=365)
    assert rule.ttl("audit_hold") is None
    assert RetentionRule.from_json({"regulated": "2w"}).regulated == timedelta(weeks=2)
    with pytest.raises(ValueError):
        RetentionRule.from_env({"RR_RETENTION_STANDARD": "never"})
    with pytest.raises(ValueError):
        RetentionRule.from_json({"audit_hold": "1d"})
    with pytest.raises(ValueError):
        parse_duration("soon")


# --------------------------------------------------------------------------
# export / import


def test_export_import_round_trip(tmp_path):
    src = ReceiptStore()
    for doc in CORPUS[:100]:
        src.append(doc)
    lines = list(src.export_jsonl())
    dst = ReceiptStore(tmp_path)
    assert dst.import_jsonl(lines) == 100
    assert list(dst.export_jsonl()) == lines


def test_end_user_export_is_redacted_and_valid():
    src = ReceiptStore()
    for doc in CORPUS[:100]:
        src.append(dict(doc, provider_chain=[{"role": "served", "provider": "p", "model": "m"}]))
    window = ReceiptFilter(start=T0, end=T0 + timedelta(days=10))
    lines = list(src.export_jsonl(window, audience="end_user", policy=DEFAULT_POLICY))
    assert len(lines) == len(src.query(window)) > 0
    for line in lines:
        doc = json.loads(line)
        assert validate_document(doc).errors == ()
        assert "provider_chain" not in doc
        assert any(e["field"] == "provider_chain" for e in doc["redactions"])


def test_bad_filter_rejected():
    with pytest.raises(ValueError):
        ReceiptFilter(start=T0, end=T0 - timedelta(days=1))
    with pytest.raises(ValueError):
        ReceiptFilter(retention_class="forever")
