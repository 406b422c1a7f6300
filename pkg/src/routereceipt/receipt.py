"""Route receipt data model, validation and canonical serialization.

The embedded v0.1 JSON Schema is the single source for field names, the
required set and every closed enum.  Validation is a small interpreter over
that schema so error paths and kinds stay under our control; the public
``jsonschema`` package is used only by the test-suite as a second opinion.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import re
import secrets
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from importlib import resources
from typing import Any, Iterator, Mapping

SCHEMA_VERSION = "route-receipt.v0.1"
SCHEMA_ID = "https://routereceipt.org/schemas/route-receipt/v0.1/schema.json"
_SCHEMA_RESOURCE = "route-receipt.v0.1.schema.json"


@lru_cache(maxsize=1)
def _schema_text() -> str:
    return resources.files("routereceipt.data").joinpath(_SCHEMA_RESOURCE).read_text("utf-8")


def load_schema() -> dict:
    """Return a fresh copy of the embedded schema document."""
    return json.loads(_schema_text())


def export_schema() -> str:
    """Schema text in declaration order, two-space indented."""
    return json.dumps(load_schema(), ensure_ascii=False, indent=2) + "\n"


_SCHEMA = load_schema()
_PROPS = _SCHEMA["properties"]
_DEFS = _SCHEMA["$defs"]

REQUIRED_FIELDS: tuple[str, ...] = tuple(_SCHEMA["required"])
TOP_LEVEL_FIELDS: tuple[str, ...] = tuple(_PROPS)

MODEL_IDENTIFIER_TYPES = tuple(_PROPS["model_identifier_type"]["enum"])
REGION_CLASSES = tuple(_PROPS["region_class"]["enum"])
COMPLETION_STATUSES = tuple(_PROPS["completion_status"]["enum"])
RETENTION_CLASSES = tuple(_PROPS["retention_class"]["enum"])
TIER_CHANGE_REASONS = tuple(_PROPS["service_tier"]["properties"]["change_reason"]["enum"])
EFFORT_LEVELS = tuple(_PROPS["effort"]["properties"]["requested"]["enum"])
EFFORT_STATUSES = tuple(_PROPS["effort"]["properties"]["effective_status"]["enum"])
TRUNCATION_STATES = tuple(_PROPS["context"]["properties"]["input_truncated"]["enum"])
WINDOW_CLASSES = tuple(_PROPS["context"]["properties"]["context_window_class"]["enum"])
FALLBACK_STATUSES = tuple(_PROPS["fallback"]["properties"]["status"]["enum"])
FALLBACK_REASONS = tuple(_PROPS["fallback"]["properties"]["reason"]["enum"])
SAFETY_STATUSES = tuple(_PROPS["safety"]["properties"]["status"]["enum"])
SAFETY_ACTIONS = tuple(_PROPS["safety"]["properties"]["visible_action"]["enum"])
HOP_ROLES = tuple(_DEFS["provider_hop"]["properties"]["role"]["enum"])
REDACTION_REASONS = tuple(_DEFS["redaction"]["properties"]["reason"]["enum"])
AUDIENCES = tuple(_DEFS["redaction"]["properties"]["visible_to"]["items"]["enum"])


class ReceiptError(Exception):
    """Base class for receipt handling failures."""


class InvalidReceiptError(ReceiptError):
    """Raised when a document does not satisfy the receipt schema."""

    def __init__(self, report: "ValidationReport"):
        self.report = report
        first = report.errors[0] if report.errors else None
        msg = f"{len(report.errors)} validation error(s)"
        if first is not None:
            msg += f"; first: {first.kind} at {first.path or '/'} ({first.detail})"
        super().__init__(msg)


# --------------------------------------------------------------------------
# timestamps

_DATETIME_RE = re.compile(
    r"^(\d{4})-(\d{2})-(\d{2})T(\d{2}):(\d{2}):(\d{2})(?:\.(\d+))?Z$"
)


def parse_timestamp(text: str) -> datetime:
    """Parse a UTC ``...Z`` timestamp into an aware datetime.

    Only the ``Z`` suffix is accepted so that stored receipts share one
    normal form.  Fractional digits beyond microseconds are truncated.
    """
    m = _DATETIME_RE.match(text)
    if m is None:
        raise ValueError(f"not a UTC date-time with 'Z' suffix: {text!r}")
    year, month, day, hour, minute, second = (int(g) for g in m.groups()[:6])
    frac = m.group(7) or ""
    micro = int((frac + "000000")[:6])
    return datetime(year, month, day, hour, minute, second, micro, tzinfo=timezone.utc)


def format_timestamp(moment: datetime) -> str:
    if moment.tzinfo is None:
        raise ValueError("timestamp must be timezone-aware")
    moment = moment.astimezone(timezone.utc)
    if moment.microsecond:
        return moment.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


# --------------------------------------------------------------------------
# data model
#
# Dataclass fields are declared in schema order; that order is the canonical
# key order.  ``None`` means "absent" (the schema never admits null).


def _json_name(f: dataclasses.Field) -> str:
    return f.metadata.get("json", f.name)


def to_plain(value: Any) -> Any:
    """JSON-ready form of a model object; absent (None) fields are dropped."""
    if dataclasses.is_dataclass(value):
        out = {}
        for f in dataclasses.fields(value):
            item = getattr(value, f.name)
            if item is None:
                continue
            if f.metadata.get("sorted"):
                out[_json_name(f)] = sorted_copy(item)
            else:
                out[_json_name(f)] = to_plain(item)
        return out
    if isinstance(value, (tuple, list)):
        return [to_plain(v) for v in value]
    return value


def sorted_copy(value: Any) -> Any:
    """Deep copy with every mapping's keys sorted."""
    if isinstance(value, Mapping):
        return {k: sorted_copy(value[k]) for k in sorted(value)}
    if isinstance(value, (list, tuple)):
        return [sorted_copy(v) for v in value]
    return value


def _tuple(items, conv=None):
    if items is None:
        return None
    return tuple(conv(i) if conv else i for i in items)


def _int(value):
    # draft 2020-12 treats 3.0 as an integer
    return None if value is None else int(value)


@dataclass(frozen=True, kw_only=True)
class ServiceTierRecord:
    requested: str | None = None
    effective: str
    change_reason: str | None = None

    @classmethod
    def from_json(cls, d: Mapping) -> "ServiceTierRecord":
        return cls(requested=d.get("requested"), effective=d["effective"],
                   change_reason=d.get("change_reason"))


@dataclass(frozen=True, kw_only=True)
class EffortRecord:
    requested: str | None = None
    effective_status: str

    @classmethod
    def from_json(cls, d: Mapping) -> "EffortRecord":
        return cls(requested=d.get("requested"), effective_status=d["effective_status"])


@dataclass(frozen=True, kw_only=True)
class ToolUse:
    name: str
    invocation_count: int
    result_refs: tuple[str, ...] | None = None
    redacted: bool | None = None

    @classmethod
    def from_json(cls, d: Mapping) -> "ToolUse":
        return cls(name=d["name"], invocation_count=int(d["invocation_count"]),
                   result_refs=_tuple(d.get("result_refs")), redacted=d.get("redacted"))


@dataclass(frozen=True, kw_only=True)
class RetrievalSummary:
    source_classes: tuple[str, ...] | None = None
    retrieved_item_count: int | None = None
    redacted: bool | None = None

    @classmethod
    def from_json(cls, d: Mapping) -> "RetrievalSummary":
        return cls(source_classes=_tuple(d.get("source_classes")),
                   retrieved_item_count=_int(d.get("retrieved_item_count")),
                   redacted=d.get("redacted"))


@dataclass(frozen=True, kw_only=True)
class ToolsRecord:
    allowed: tuple[str, ...] | None = None
    used: tuple[ToolUse, ...] = ()
    retrieval_summary: RetrievalSummary | None = None

    @classmethod
    def from_json(cls, d: Mapping) -> "ToolsRecord":
        summary = d.get("retrieval_summary")
        return cls(allowed=_tuple(d.get("allowed")),
                   used=_tuple(d["used"], ToolUse.from_json),
                   retrieval_summary=None if summary is None else RetrievalSummary.from_json(summary))


@dataclass(frozen=True, kw_only=True)
class ContextRecord:
    input_truncated: str
    retrieved_item_count: int | None = None
    context_window_class: str | None = None

    @classmethod
    def from_json(cls, d: Mapping) -> "ContextRecord":
        return cls(input_truncated=d["input_truncated"],
                   retrieved_item_count=_int(d.get("retrieved_item_count")),
                   context_window_class=d.get("context_window_class"))


@dataclass(frozen=True, kw_only=True)
class FallbackRecord:
    status: str
    from_: str | None = field(default=None, metadata={"json": "from"})
    to: str | None = None
    reason: str | None = None

    @classmethod
    def from_json(cls, d: Mapping) -> "FallbackRecord":
        return cls(status=d["status"], from_=d.get("from"), to=d.get("to"), reason=d.get("reason"))


@dataclass(frozen=True, kw_only=True)
class SafetyRecord:
    status: str
    category: str | None = None
    visible_action: str | None = None

    @classmethod
    def from_json(cls, d: Mapping) -> "SafetyRecord":
        return cls(status=d["status"], category=d.get("category"),
                   visible_action=d.get("visible_action"))


@dataclass(frozen=True, kw_only=True)
class ProviderHop:
    role: str
    provider: str | None = None
    model: str | None = None
    redacted: bool | None = None

    @classmethod
    def from_json(cls, d: Mapping) -> "ProviderHop":
        return cls(role=d["role"], provider=d.get("provider"), model=d.get("model"),
                   redacted=d.get("redacted"))


@dataclass(frozen=True, kw_only=True)
class RedactionEntry:
    field: str
    reason: str
    visible_to: tuple[str, ...] | None = None

    @classmethod
    def from_json(cls, d: Mapping) -> "RedactionEntry":
        return cls(field=d["field"], reason=d["reason"], visible_to=_tuple(d.get("visible_to")))


@dataclass(frozen=True, kw_only=True)
class RouteReceipt:
    schema_version: str = SCHEMA_VERSION
    receipt_id: str
    request_id: str
    served_at: str
    requested_model: str | None = None
    resolved_model: str | None = None
    model_identifier_type: str
    service_tier: ServiceTierRecord | None = None
    effort: EffortRecord | None = None
    tools: ToolsRecord | None = None
    context: ContextRecord | None = None
    fallback: FallbackRecord
    safety: SafetyRecord
    region_class: str
    provider_chain: tuple[ProviderHop, ...] | None = None
    completion_status: str
    redactions: tuple[RedactionEntry, ...] = ()
    retention_class: str | None = None
    provider_extensions: dict | None = field(default=None, metadata={"sorted": True})

    @classmethod
    def from_json(cls, d: Mapping) -> "RouteReceipt":
        def opt(name, conv):
            v = d.get(name)
            return None if v is None else conv(v)

        ext = d.get("provider_extensions")
        return cls(
            schema_version=d["schema_version"],
            receipt_id=d["receipt_id"],
            request_id=d["request_id"],
            served_at=d["served_at"],
            requested_model=d.get("requested_model"),
            resolved_model=d.get("resolved_model"),
            model_identifier_type=d["model_identifier_type"],
            service_tier=opt("service_tier", ServiceTierRecord.from_json),
            effort=opt("effort", EffortRecord.from_json),
            tools=opt("tools", ToolsRecord.from_json),
            context=opt("context", ContextRecord.from_json),
            fallback=FallbackRecord.from_json(d["fallback"]),
            safety=SafetyRecord.from_json(d["safety"]),
            region_class=d["region_class"],
            provider_chain=opt("provider_chain", lambda v: _tuple(v, ProviderHop.from_json)),
            completion_status=d["completion_status"],
            redactions=_tuple(d["redactions"], RedactionEntry.from_json),
            retention_class=d.get("retention_class"),
            provider_extensions=None if ext is None else copy.deepcopy(dict(ext)),
        )

    def to_json(self) -> dict:
        """Plain JSON-ready dict in canonical key order."""
        return to_plain(self)

    @property
    def served_at_dt(self) -> datetime:
        return parse_timestamp(self.served_at)


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ValidationIssue:
    path: str
    kind: str
    detail: str


@dataclass(frozen=True)
class ConsistencyWarning:
    path: str
    code: str
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[ValidationIssue, ...] = ()
    warnings: tuple[ConsistencyWarning, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.errors

    def to_json(self) -> dict:
        return {
            "valid": self.valid,
            "errors": [dataclasses.asdict(e) for e in self.errors],
            "warnings": [dataclasses.asdict(w) for w in self.warnings],
        }


ERROR_KINDS = ("missing_required", "unknown_field", "bad_enum", "bad_type", "bad_format", "bad_const")

_JSON_TYPES = {
    "object": lambda v: isinstance(v, dict),
    "array": lambda v: isinstance(v, list),
    "string": lambda v: isinstance(v, str),
    "boolean": lambda v: isinstance(v, bool),
    "integer": lambda v: (isinstance(v, int) and not isinstance(v, bool))
    or (isinstance(v, float) and v.is_integer()),
}


def _escape(token: str) -> str:
    return token.replace("~", "~0").replace("/", "~1")


def _resolve(node: Mapping) -> Mapping:
    ref = node.get("$ref")
    if ref is None:
        return node
    prefix = "#/$defs/"
    if not ref.startswith(prefix):
        raise ValueError(f"unsupported $ref {ref!r}")
    return _DEFS[ref[len(prefix):]]


def _check(value: Any, node: Mapping, path: str) -> Iterator[ValidationIssue]:
    node = _resolve(node)
    expected = node.get("type")
    if expected is not None and not _JSON_TYPES[expected](value):
        yield ValidationIssue(path, "bad_type", f"expected {expected}, got {type(value).__name__}")
        return
    if "const" in node and value != node["const"]:
        yield ValidationIssue(path, "bad_const", f"expected {node['const']!r}, got {value!r}")
        return
    if "enum" in node and value not in node["enum"]:
        yield ValidationIssue(path, "bad_enum", f"{value!r} not in {node['enum']}")
        return
    if "minLength" in node and len(value) < node["minLength"]:
        yield ValidationIssue(path, "bad_format", f"shorter than {node['minLength']} character(s)")
    if "minimum" in node and value < node["minimum"]:
        yield ValidationIssue(path, "bad_format", f"{value!r} is below minimum {node['minimum']}")
    if node.get("format") == "date-time":
        try:
            parse_timestamp(value)
        except ValueError as exc:
            yield ValidationIssue(path, "bad_format", str(exc))
    if expected == "array":
        if node.get("uniqueItems"):
            seen = []
            for item in value:
                if item in seen:
                    yield ValidationIssue(path, "bad_format", f"duplicate item {item!r}")
                    break
                seen.append(item)
        items = node.get("items")
        if items is not None:
            for i, item in enumerate(value):
                yield from _check(item, items, f"{path}/{i}")
    if expected == "object":
        props = node.get("properties", {})
        for name in node.get("required", ()):
            if name not in value:
                yield ValidationIssue(f"{path}/{_escape(name)}", "missing_required", "required field absent")
        for name, item in value.items():
            sub = f"{path}/{_escape(name)}"
            if name in props:
                yield from _check(item, props[name], sub)
            elif node.get("additionalProperties") is False:
                yield ValidationIssue(sub, "unknown_field", "field not defined by the schema")


def _decode(doc: str | bytes | Mapping) -> tuple[Any, ValidationIssue | None]:
    if isinstance(doc, Mapping):
        return doc, None
    try:
        if isinstance(doc, bytes):
            doc = doc.decode("utf-8")
        return json.loads(doc), None
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        return None, ValidationIssue("", "bad_type", f"not well-formed JSON: {exc}")


def validate_document(doc: str | bytes | Mapping) -> ValidationReport:
    """Validate a receipt document (UTF-8 JSON text or decoded mapping).

    Errors never short-circuit: every violation is reported.  Consistency
    warnings are attached only when the document is schema-valid.
    """
    data, err = _decode(doc)
    if err is not None:
        return ValidationReport(errors=(err,))
    errors = tuple(_check(data, _SCHEMA, ""))
    if errors:
        return ValidationReport(errors=errors)
    warnings = tuple(check_consistency(RouteReceipt.from_json(data)))
    return ValidationReport(warnings=warnings)


def parse_receipt(doc: str | bytes | Mapping) -> RouteReceipt:
    """Typed receipt from a document; raises InvalidReceiptError if invalid."""
    data, err = _decode(doc)
    if err is not None:
        raise InvalidReceiptError(ValidationReport(errors=(err,)))
    errors = tuple(_check(data, _SCHEMA, ""))
    if errors:
        raise InvalidReceiptError(ValidationReport(errors=errors))
    return RouteReceipt.from_json(data)


def canonical_json(value: Any) -> str:
    """Compact UTF-8 JSON text preserving mapping insertion order."""
    return json.dumps(value, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def canonical_serialize(receipt: RouteReceipt) -> str:
    return canonical_json(receipt.to_json())


def canonicalize_document(doc: str | bytes | Mapping) -> str:
    return canonical_serialize(parse_receipt(doc))


def new_receipt_id() -> str:
    return "rr-" + secrets.token_hex(16)


# --------------------------------------------------------------------------
# cross-field consistency

_NOTHING_HIDDEN = ("not_collected", "not_applicable")


def lookup(receipt: RouteReceipt, dotted: str) -> list[Any]:
    """Values at a dotted field path; array levels fan out."""
    current: list[Any] = [receipt]
    for part in dotted.split("."):
        nxt = []
        for obj in current:
            if isinstance(obj, tuple):
                candidates = obj
            else:
                candidates = (obj,)
            for c in candidates:
                v = _attr(c, part)
                if v is not None:
                    nxt.append(v)
        current = nxt
    out = []
    for v in current:
        out.extend(v if isinstance(v, tuple) and v and dataclasses.is_dataclass(v[0]) else [v])
    return out


def _attr(obj: Any, name: str) -> Any:
    if isinstance(obj, Mapping):
        return obj.get(name)
    if not dataclasses.is_dataclass(obj):
        return None
    for f in dataclasses.fields(obj):
        if _json_name(f) == name:
            return getattr(obj, f.name)
    return None


def _is_unredacted(value: Any) -> bool:
    if value == "redacted":
        return False
    if dataclasses.is_dataclass(value):
        if getattr(value, "redacted", None) is True:
            return False
        status = getattr(value, "status", None)
        if status == "redacted":
            return False
    return True


def check_consistency(receipt: RouteReceipt) -> list[ConsistencyWarning]:
    """Cross-field contradictions the schema cannot express.

    These are warnings only: third-party receipts that trip them are still
    valid documents.
    """
    out: list[ConsistencyWarning] = []
    tier = receipt.service_tier
    if (tier is not None and tier.change_reason == "none" and tier.requested is not None
            and tier.requested != tier.effective):
        out.append(ConsistencyWarning(
            "/service_tier/change_reason", "tier_change_unexplained",
            f"requested {tier.requested!r} but effective {tier.effective!r} with change_reason 'none'"))

    fb = receipt.fallback
    if fb.status == "none" and (fb.from_ is not None or fb.to is not None):
        out.append(ConsistencyWarning(
            "/fallback", "fallback_endpoints_without_fallback",
            "status 'none' but from/to are recorded"))

    safety = receipt.safety
    if safety.status == "none" and safety.visible_action not in (None, "none"):
        out.append(ConsistencyWarning(
            "/safety/visible_action", "safety_action_without_intervention",
            f"status 'none' but visible_action {safety.visible_action!r}"))

    ctx = receipt.context
    if ctx is not None and ctx.retrieved_item_count is not None and receipt.tools is not None:
        bearing = [t for t in receipt.tools.used if t.result_refs is not None]
        if bearing:
            total = sum(len(t.result_refs) for t in bearing)
            if total != ctx.retrieved_item_count:
                out.append(ConsistencyWarning(
                    "/context/retrieved_item_count", "retrieval_count_mismatch",
                    f"context reports {ctx.retrieved_item_count} items, tools reference {total}"))

    for i, entry in enumerate(receipt.redactions):
        if entry.reason in _NOTHING_HIDDEN or entry.visible_to:
            continue
        values = lookup(receipt, entry.field)
        if any(_is_unredacted(v) for v in values):
            out.append(ConsistencyWarning(
                f"/redactions/{i}", "redacted_field_present",
                f"{entry.field!r} is marked hidden ({entry.reason}) from every audience but is present"))
    return out
