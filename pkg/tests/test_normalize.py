import copy
import itertools
import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES, GOLDEN, load
from routereceipt.normalize import (
    DOCUMENTED_FIELDS,
    OBSERVABLE_FIELDS,
    SURFACES,
    Envelope,
    ExtractionError,
    MergeError,
    canonical_fragment,
    extract_fragment,
    merge,
)
from routereceipt.receipt import to_plain, validate_document

ENVELOPE = Envelope(receipt_id="rr-norm-1", request_id="req-norm-1", served_at="2026-06-15T14:03:27Z")


def raw(surface):
    return load(FIXTURES / "surfaces" / f"{surface}.json")


def partial(surface, doc=None):
    frag = extract_fragment(surface, raw(surface) if doc is None else doc)
    return {k: to_plain(v) for k, v in frag.partial.items()}


def test_priority_downgrade_reproduces_reference_fragment():
    expected = json.dumps(load(GOLDEN / "priority_downgrade_fragment.json"), separators=(",", ":"))
    assert canonical_fragment(extract_fragment("openai_priority", raw("openai_priority"))) == expected


def test_anthropic_effective_tier():
    assert partial("anthropic_tiers") == {"service_tier": {"effective": "priority"}}


def test_anthropic_standard_only_request_is_recorded():
    doc = raw("anthropic_tiers")
    doc["request"]["service_tier"] = "standard_only"
    doc["response"]["usage"]["service_tier"] = "standard"
    assert partial("anthropic_tiers", doc) == {
        "service_tier": {"requested": "standard", "effective": "standard", "change_reason": "none"}}


def test_bedrock_change_without_documented_reason_is_unknown():
    assert partial("bedrock_tiers") == {
        "service_tier": {"requested": "priority", "effective": "standard", "change_reason": "unknown"}}


def test_web_search_summary():
    assert partial("openai_web_search") == {"tools": {"used": [{
        "name": "web_search", "invocation_count": 2,
        "result_refs": ["https://example.org/a", "https://example.org/b"]}]}}


def test_web_search_without_calls_records_empty_use():
    doc = {"output": [{"type": "message", "content": []}]}
    assert partial("openai_web_search", doc) == {"tools": {"used": []}}


def test_openrouter_fallback():
    assert partial("openrouter_fallback") == {
        "requested_model": "m-a", "resolved_model": "m-b", "fallback": {"status": "occurred"}}


def test_openrouter_same_model_is_no_fallback():
    doc = raw("openrouter_fallback")
    doc["response"]["model"] = "m-a"
    assert partial("openrouter_fallback", doc)["fallback"] == {"status": "none"}


@pytest.mark.parametrize("surface,key", [
    ("openai_priority", "response"),
    ("anthropic_tiers", "response"),
    ("bedrock_tiers", "response"),
    ("openai_web_search", "output"),
    ("openrouter_fallback", "response"),
    ("simulated", "route"),
])
def test_missing_key_field_names_it(surface, key):
    doc = raw(surface)
    del doc[key]
    with pytest.raises(ExtractionError, match=key):
        extract_fragment(surface, doc)


def test_unknown_surface_rejected():
    with pytest.raises(ExtractionError, match="unknown surface"):
        extract_fragment("carrier_pigeon", {})


def test_non_object_raw_rejected():
    with pytest.raises(ExtractionError):
        extract_fragment("openai_priority", ["not", "an", "object"])


@pytest.mark.parametrize("surface", SURFACES)
def test_fragments_carry_only_documented_fields(surface):
    frag = extract_fragment(surface, raw(surface))
    assert set(frag.partial) <= DOCUMENTED_FIELDS[surface]


@pytest.mark.parametrize("surface", SURFACES)
def test_extraction_is_deterministic(surface):
    a = extract_fragment(surface, raw(surface))
    b = extract_fragment(surface, copy.deepcopy(raw(surface)))
    assert canonical_fragment(a) == canonical_fragment(b)


def test_leftover_metadata_lands_in_provider_extensions():
    result = merge(ENVELOPE, [extract_fragment("bedrock_tiers", raw("bedrock_tiers"))])
    assert result.receipt.provider_extensions == {"bedrock_tiers": {"metrics": {"latencyMs": 912}}}


# --------------------------------------------------------------------------
# merge


def test_merge_tier_fragment_matches_reference():
    result = merge(ENVELOPE, [extract_fragment("openai_priority", raw("openai_priority"))])
    doc = result.receipt.to_json()
    assert doc["fallback"] == {"status": "occurred", "reason": "capacity"}
    assert doc["redactions"] == []
    assert validate_document(doc).errors == ()


def test_merge_without_fragments_is_absence_honest():
    receipt = merge(ENVELOPE).receipt
    assert receipt.fallback.status == "unknown"
    assert receipt.safety.status == "unknown"
    assert [(e.field, e.reason) for e in receipt.redactions] == [
        (name, "not_collected") for name in ("service_tier", "effort", "tools", "context")]


def test_merge_conflict_names_field_and_values():
    a = extract_fragment("simulated", {"route": {"resolved_model": "m-1"}})
    b = extract_fragment("simulated", {"route": {"resolved_model": "m-2"}})
    with pytest.raises(MergeError) as info:
        merge(ENVELOPE, [a, b])
    assert info.value.path == "/resolved_model"
    assert (info.value.left, info.value.right) == ("m-1", "m-2")


def test_merge_identical_overlap_is_fine():
    a = extract_fragment("simulated", {"route": {"resolved_model": "m-1"}})
    assert merge(ENVELOPE, [a, a]).receipt.resolved_model == "m-1"


def test_merge_surfaces_consistency_warnings():
    frag = extract_fragment("simulated", {"route": {
        "service_tier": {"requested": "priority", "effective": "default", "change_reason": "none"}}})
    assert [w.code for w in merge(ENVELOPE, [frag]).warnings] == ["tier_change_unexplained"]


def test_tools_allowed_is_recorded():
    frag = extract_fragment("openai_web_search", raw("openai_web_search"))
    tools = merge(ENVELOPE, [frag], tools_allowed=["web_search", "file_search"]).receipt.tools
    assert tools.allowed == ("web_search", "file_search")


def test_envelope_rejects_bad_values():
    with pytest.raises(ValueError):
        Envelope(receipt_id="r", request_id="q", served_at="2026-06-15T14:03:27Z", region_class="mars")
    with pytest.raises(ValueError):
        Envelope(receipt_id="", request_id="q", served_at="2026-06-15T14:03:27Z")
    with pytest.raises(ValueError):
        Envelope(receipt_id="r", request_id="q", served_at="now")


_COMPATIBLE = [
    s for s in itertools.chain.from_iterable(
        itertools.combinations(SURFACES[:5], k) for k in range(0, 6))
    # the tier surfaces all claim service_tier and disagree with each other
    if sum(x in s for x in ("openai_priority", "anthropic_tiers", "bedrock_tiers")) <= 1
    # openai_priority's inferred fallback disagrees with openrouter's
    and not {"openai_priority", "openrouter_fallback"} <= set(s)
]


@given(st.sampled_from(_COMPATIBLE))
def test_merge_output_valid_with_provenance(surfaces):
    fragments = [extract_fragment(s, raw(s)) for s in surfaces]
    result = merge(ENVELOPE, fragments)
    doc = result.receipt.to_json()
    assert validate_document(doc).errors == ()
    claimed = {}
    for frag in fragments:
        for name in frag.partial:
            claimed.setdefault(name, set()).add(frag.surface)
    for name in ("requested_model", "resolved_model", "service_tier", "effort", "tools", "context",
                 "provider_chain"):
        if name in doc:
            assert result.sources[name] in claimed[name]
    documented = set().union(*(DOCUMENTED_FIELDS[s] for s in surfaces)) if surfaces else set(OBSERVABLE_FIELDS)
    not_collected = {e["field"] for e in doc["redactions"] if e["reason"] == "not_collected"}
    assert not_collected == {n for n in OBSERVABLE_FIELDS if n in documented and n not in doc}
