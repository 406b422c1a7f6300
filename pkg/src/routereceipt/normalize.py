"""Turn provider response metadata into receipt fragments and merge them.

Each supported surface exposes a small, documented slice of the route.  The
raw shapes accepted here are this project's fixture convention (see
``fixtures/surfaces``); they mirror the field names the providers document
but are not live API contracts.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from routereceipt.receipt import (
    COMPLETION_STATUSES,
    MODEL_IDENTIFIER_TYPES,
    REGION_CLASSES,
    RETENTION_CLASSES,
    TOP_LEVEL_FIELDS,
    ConsistencyWarning,
    ContextRecord,
    EffortRecord,
    FallbackRecord,
    ProviderHop,
    RedactionEntry,
    ReceiptError,
    RouteReceipt,
    SafetyRecord,
    ServiceTierRecord,
    ToolsRecord,
    ToolUse,
    canonical_json,
    check_consistency,
    parse_receipt,
    parse_timestamp,
    sorted_copy,
    to_plain,
)

logger = logging.getLogger(__name__)

SURFACES = (
    "openai_priority",
    "anthropic_tiers",
    "bedrock_tiers",
    "openai_web_search",
    "openrouter_fallback",
    "simulated",
)

# Receipt fields each surface can populate.
DOCUMENTED_FIELDS: dict[str, frozenset[str]] = {
    "openai_priority": frozenset({"service_tier", "fallback"}),
    "anthropic_tiers": frozenset({"service_tier"}),
    "bedrock_tiers": frozenset({"service_tier"}),
    "openai_web_search": frozenset({"tools"}),
    "openrouter_fallback": frozenset({"requested_model", "resolved_model", "fallback"}),
    "simulated": frozenset({
        "requested_model", "resolved_model", "service_tier", "effort", "tools",
        "context", "fallback", "safety", "provider_chain",
    }),
}

# Optional detail a deployment is expected to observe; missing ones are
# recorded as not_collected on merge.
OBSERVABLE_FIELDS = ("service_tier", "effort", "tools", "context")

# Surfaces whose providers document downgrading priority traffic on ramp.
_DOWNGRADE_ON_RAMP = frozenset({"openai_priority"})


class ExtractionError(ReceiptError):
    """Raw metadata does not have the documented shape for its surface."""


class MergeError(ReceiptError):
    def __init__(self, path: str, left: Any, right: Any):
        self.path, self.left, self.right = path, left, right
        super().__init__(f"conflicting values at {path}: {left!r} vs {right!r}")


@dataclass(frozen=True)
class ReceiptFragment:
    surface: str
    partial: Mapping[str, Any]
    observed_at: str | None = None
    extensions: Mapping[str, Any] | None = None

    def to_json(self) -> dict:
        out: dict[str, Any] = {}
        for name in TOP_LEVEL_FIELDS:
            if name in self.partial:
                out[name] = to_plain(self.partial[name])
            elif name == "redactions":
                out[name] = []
            elif name == "provider_extensions" and self.extensions:
                out[name] = {self.surface: sorted_copy(self.extensions)}
        return out


def canonical_fragment(fragment: ReceiptFragment) -> str:
    """Canonical text of a fragment: receipt key order plus an empty redaction list."""
    return canonical_json(fragment.to_json())


@dataclass(frozen=True, kw_only=True)
class Envelope:
    receipt_id: str
    request_id: str
    served_at: str
    model_identifier_type: str = "unknown"
    region_class: str = "unknown"
    completion_status: str = "unknown"
    retention_class: str | None = None

    def __post_init__(self):
        if not self.receipt_id or not self.request_id:
            raise ValueError("receipt_id and request_id must be non-empty")
        parse_timestamp(self.served_at)
        for value, allowed, name in (
            (self.model_identifier_type, MODEL_IDENTIFIER_TYPES, "model_identifier_type"),
            (self.region_class, REGION_CLASSES, "region_class"),
            (self.completion_status, COMPLETION_STATUSES, "completion_status"),
        ):
            if value not in allowed:
                raise ValueError(f"{name} {value!r} not in {allowed}")
        if self.retention_class is not None and self.retention_class not in RETENTION_CLASSES:
            raise ValueError(f"retention_class {self.retention_class!r} not in {RETENTION_CLASSES}")

    @classmethod
    def from_json(cls, d: Mapping) -> "Envelope":
        known = {k: d[k] for k in (
            "receipt_id", "request_id", "served_at", "model_identifier_type",
            "region_class", "completion_status", "retention_class") if k in d}
        return cls(**known)


# --------------------------------------------------------------------------
# extraction


def _require(raw: Mapping, *keys: str) -> Any:
    node: Any = raw
    walked = []
    for key in keys:
        walked.append(key)
        if not isinstance(node, Mapping) or key not in node:
            raise ExtractionError(f"missing key {'.'.join(walked)!r}")
        node = node[key]
    return node


def _get(raw: Any, *keys: str) -> Any:
    node = raw
    for key in keys:
        if not isinstance(node, Mapping):
            return None
        node = node.get(key)
    return node


def _leftovers(raw: Mapping, consumed: set[str]) -> dict | None:
    rest = {k: copy.deepcopy(v) for k, v in raw.items() if k not in consumed}
    return rest or None


def _tier_record(surface: str, requested: str | None, effective: str) -> ServiceTierRecord:
    if requested is None:
        return ServiceTierRecord(effective=effective)
    if requested == effective:
        reason = "none"
    elif surface in _DOWNGRADE_ON_RAMP:
        reason = "capacity"
    else:
        reason = "unknown"
    return ServiceTierRecord(requested=requested, effective=effective, change_reason=reason)


def _extract_openai_priority(raw: Mapping) -> tuple[dict, dict | None]:
    effective = _require(raw, "response", "service_tier")
    requested = _get(raw, "request", "service_tier")
    if requested == "auto":
        requested = None
    partial: dict[str, Any] = {"service_tier": _tier_record("openai_priority", requested, effective)}
    # priority traffic served elsewhere is a capacity fallback
    if requested == "priority" and effective != "priority":
        partial["fallback"] = FallbackRecord(status="occurred", reason="capacity")
    response = raw["response"]
    return partial, _leftovers(response, {"service_tier"})


def _extract_anthropic(raw: Mapping) -> tuple[dict, dict | None]:
    effective = _require(raw, "response", "usage", "service_tier")
    requested = {"standard_only": "standard"}.get(_get(raw, "request", "service_tier"))
    response = raw["response"]
    rest = _leftovers(response, {"usage"}) or {}
    usage_rest = _leftovers(response["usage"], {"service_tier"})
    if usage_rest:
        rest["usage"] = usage_rest
    return {"service_tier": _tier_record("anthropic_tiers", requested, effective)}, rest or None


def _extract_bedrock(raw: Mapping) -> tuple[dict, dict | None]:
    effective = _require(raw, "response", "serviceTier", "type")
    requested = _get(raw, "request", "serviceTier", "type")
    return (
        {"service_tier": _tier_record("bedrock_tiers", requested, effective)},
        _leftovers(raw["response"], {"serviceTier"}),
    )


def _extract_web_search(raw: Mapping) -> tuple[dict, dict | None]:
    output = _require(raw, "output")
    if not isinstance(output, list):
        raise ExtractionError("'output' must be a list")
    calls = [item for item in output if isinstance(item, Mapping) and item.get("type") == "web_search_call"]
    refs: list[str] = []
    for item in output:
        if not isinstance(item, Mapping) or item.get("type") != "message":
            continue
        for part in item.get("content") or ():
            for note in (part or {}).get("annotations") or ():
                url = note.get("url") if isinstance(note, Mapping) else None
                if note.get("type") == "url_citation" and url and url not in refs:
                    refs.append(url)
    if calls:
        used = (ToolUse(name="web_search", invocation_count=len(calls), result_refs=tuple(refs)),)
    else:
        used = ()
    return {"tools": ToolsRecord(used=used)}, _leftovers(raw, {"output"})


def _extract_openrouter(raw: Mapping) -> tuple[dict, dict | None]:
    returned = _require(raw, "response", "model")
    requested = _get(raw, "request", "model")
    if requested is None:
        models = _get(raw, "request", "models") or []
        requested = models[0] if models else None
    partial: dict[str, Any] = {"resolved_model": returned}
    if requested is None:
        partial["fallback"] = FallbackRecord(status="unknown")
    else:
        partial["requested_model"] = requested
        partial["fallback"] = FallbackRecord(status="none" if returned == requested else "occurred")
    return partial, _leftovers(raw["response"], {"model"})


def _extract_simulated(raw: Mapping) -> tuple[dict, dict | None]:
    route = _require(raw, "route")
    if not isinstance(route, Mapping):
        raise ExtractionError("'route' must be an object")
    partial: dict[str, Any] = {}
    for name in ("requested_model", "resolved_model"):
        if route.get(name) is not None:
            partial[name] = route[name]
    tier = route.get("service_tier")
    if tier is not None:
        record = ServiceTierRecord.from_json(tier)
        if record.change_reason is None and record.requested is not None:
            surface = "openai_priority" if raw.get("tier_policy") == "downgrade_on_ramp" else "simulated"
            record = _tier_record(surface, record.requested, record.effective)
        partial["service_tier"] = record
    builders = {
        "effort": EffortRecord.from_json,
        "tools": ToolsRecord.from_json,
        "context": ContextRecord.from_json,
        "fallback": FallbackRecord.from_json,
        "safety": SafetyRecord.from_json,
        "provider_chain": lambda v: tuple(ProviderHop.from_json(h) for h in v),
    }
    for name, build in builders.items():
        if route.get(name) is not None:
            try:
                partial[name] = build(route[name])
            except KeyError as exc:
                raise ExtractionError(f"missing key 'route.{name}.{exc.args[0]}'") from None
    extra = _leftovers(route, set(DOCUMENTED_FIELDS["simulated"]))
    return partial, extra


_EXTRACTORS = {
    "openai_priority": _extract_openai_priority,
    "anthropic_tiers": _extract_anthropic,
    "bedrock_tiers": _extract_bedrock,
    "openai_web_search": _extract_web_search,
    "openrouter_fallback": _extract_openrouter,
    "simulated": _extract_simulated,
}


def extract_fragment(surface: str, raw: Mapping, observed_at: str | None = None) -> ReceiptFragment:
    """Map one surface's raw metadata onto the receipt fields it documents.

    Raises ExtractionError when the surface is unknown or the raw document
    lacks the surface's key field.
    """
    if surface not in _EXTRACTORS:
        raise ExtractionError(f"unknown surface {surface!r}; expected one of {SURFACES}")
    if not isinstance(raw, Mapping):
        raise ExtractionError("raw metadata must be a JSON object")
    partial, extensions = _EXTRACTORS[surface](raw)
    stray = set(partial) - DOCUMENTED_FIELDS[surface]
    assert not stray, f"{surface} produced undocumented fields {stray}"
    return ReceiptFragment(surface=surface, partial=partial, observed_at=observed_at,
                           extensions=extensions)


# --------------------------------------------------------------------------
# merge


@dataclass(frozen=True)
class MergeResult:
    receipt: RouteReceipt
    warnings: tuple[ConsistencyWarning, ...] = ()
    sources: Mapping[str, str] = field(default_factory=dict)


def merge(
    envelope: Envelope,
    fragments: Sequence[ReceiptFragment] = (),
    *,
    tools_allowed: Sequence[str] | None = None,
) -> MergeResult:
    """Combine an envelope and fragments into one schema-valid receipt.

    Overlapping fields must agree exactly; there is no precedence order.
    Observable detail that no fragment supplied is recorded as a
    ``not_collected`` redaction: every observable field when nothing was
    observed at all, otherwise those the contributing surfaces document.
    """
    values: dict[str, Any] = {}
    sources: dict[str, str] = {}
    for frag in fragments:
        for name, value in frag.partial.items():
            if name in values and values[name] != value:
                raise MergeError(f"/{name}", to_plain(values[name]), to_plain(value))
            if name not in values:
                values[name] = value
                sources[name] = frag.surface

    if tools_allowed is not None and "tools" in values:
        tools = values["tools"]
        values["tools"] = ToolsRecord(allowed=tuple(dict.fromkeys(tools_allowed)), used=tools.used,
                                      retrieval_summary=tools.retrieval_summary)

    if fragments:
        documented = set().union(*(DOCUMENTED_FIELDS[f.surface] for f in fragments))
        expected = [name for name in OBSERVABLE_FIELDS if name in documented]
    else:
        expected = list(OBSERVABLE_FIELDS)
    redactions = tuple(
        RedactionEntry(field=name, reason="not_collected") for name in expected if name not in values
    )

    extensions = {f.surface: f.extensions for f in fragments if f.extensions}
    for name in ("receipt_id", "request_id", "served_at", "model_identifier_type",
                 "region_class", "completion_status", "retention_class"):
        sources[name] = "envelope"
    receipt = RouteReceipt(
        receipt_id=envelope.receipt_id,
        request_id=envelope.request_id,
        served_at=envelope.served_at,
        requested_model=values.get("requested_model"),
        resolved_model=values.get("resolved_model"),
        model_identifier_type=envelope.model_identifier_type,
        service_tier=values.get("service_tier"),
        effort=values.get("effort"),
        tools=values.get("tools"),
        context=values.get("context"),
        fallback=values.get("fallback") or FallbackRecord(status="unknown"),
        safety=values.get("safety") or SafetyRecord(status="unknown"),
        region_class=envelope.region_class,
        provider_chain=values.get("provider_chain"),
        completion_status=envelope.completion_status,
        redactions=redactions,
        retention_class=envelope.retention_class,
        provider_extensions=extensions or None,
    )
    # round-trip through the validator: a merge must never emit an invalid receipt
    receipt = parse_receipt(receipt.to_json())
    warnings = tuple(check_consistency(receipt))
    for w in warnings:
        logger.warning("merged receipt %s: %s at %s", receipt.receipt_id, w.code, w.path)
    return MergeResult(receipt=receipt, warnings=warnings, sources=sources)
