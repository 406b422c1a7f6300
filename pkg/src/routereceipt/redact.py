"""Audience-scoped receipt views and end-user labels.

Audiences form a total order, end_user < developer < administrator <
auditor.  A rule's ``visible_to`` list is read as the lowest audience it
names and everyone above it, so disclosure can only grow up the order.
Hidden optional fields are removed; required ones are generalized to their
``"redacted"`` value so every view is still a valid receipt.  Each hidden
field leaves a redaction entry behind.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from routereceipt.receipt import (
    AUDIENCES,
    REDACTION_REASONS,
    ReceiptError,
    RedactionEntry,
    RouteReceipt,
    load_schema,
    parse_receipt,
)

_RANK = {a: i for i, a in enumerate(AUDIENCES)}

_SCHEMA = load_schema()


def audience_rank(audience: str) -> int:
    try:
        return _RANK[audience]
    except KeyError:
        raise ValueError(f"unknown audience {audience!r}; expected one of {AUDIENCES}") from None


def audiences_from(lowest: str) -> tuple[str, ...]:
    return AUDIENCES[audience_rank(lowest):]


def upward_closure(visible_to: Iterable[str]) -> tuple[str, ...]:
    ranks = [audience_rank(a) for a in visible_to]
    if not ranks:
        return ()
    return AUDIENCES[min(ranks):]


class PolicyError(ReceiptError):
    """A redaction policy names an unknown or unredactable field, or is malformed."""


# --------------------------------------------------------------------------
# field paths


def _node(node: Mapping) -> Mapping:
    ref = node.get("$ref")
    if ref:
        return _SCHEMA["$defs"][ref.rsplit("/", 1)[-1]]
    return node


def _walk_schema(node: Mapping, prefix: str, out: dict[str, dict]) -> None:
    node = _node(node)
    if node.get("type") == "array" and "items" in node:
        _walk_schema(node["items"], prefix, out)
        return
    required = set(node.get("required", ()))
    for name, sub in node.get("properties", {}).items():
        path = f"{prefix}.{name}" if prefix else name
        resolved = _node(sub)
        out[path] = {
            "required": name in required,
            "schema": resolved,
            "parent_flag": "redacted" in node.get("properties", {}),
        }
        if resolved.get("type") in ("object", "array") and path != "provider_extensions":
            _walk_schema(resolved, path, out)


FIELD_PATHS: dict[str, dict] = {}
_walk_schema(_SCHEMA, "", FIELD_PATHS)


def _generalized(path: str) -> Any:
    """Replacement value for a required field, or None if it is removable."""
    info = FIELD_PATHS[path]
    if not info["required"]:
        return None
    schema = info["schema"]
    if "redacted" in schema.get("enum", ()):
        return "redacted"
    if schema.get("type") == "string" and "enum" not in schema:
        return "redacted"
    if schema.get("type") == "object":
        inner = schema.get("properties", {}).get("status", {})
        if "redacted" in inner.get("enum", ()):
            return {"status": "redacted"}
    return None


# identity and bookkeeping fields stay intact in every view
_NEVER_HIDDEN = frozenset({
    "schema_version", "receipt_id", "request_id", "served_at", "redactions", "tools.used.name",
})


def _redactable(path: str) -> bool:
    if path not in FIELD_PATHS or path in _NEVER_HIDDEN or path.startswith("redactions."):
        return False
    if path.rsplit(".", 1)[-1] == "redacted":
        return False
    info = FIELD_PATHS[path]
    if not info["required"]:
        return True
    return _generalized(path) is not None


REDACTABLE_PATHS: tuple[str, ...] = tuple(p for p in FIELD_PATHS if _redactable(p))


# --------------------------------------------------------------------------
# policy


@dataclass(frozen=True)
class RedactionRule:
    field_path: str
    reason: str
    visible_to: tuple[str, ...]

    def to_json(self) -> dict:
        return {"field": self.field_path, "reason": self.reason, "visible_to": list(self.visible_to)}


@dataclass(frozen=True)
class RedactionPolicy:
    rules: tuple[RedactionRule, ...] = ()
    default_visibility: Mapping[str, str] = field(default_factory=dict)
    default_reason: str = "contractual"

    def __post_init__(self):
        seen = set()
        for rule in self.rules:
            _check_path(rule.field_path)
            if rule.reason not in REDACTION_REASONS:
                raise PolicyError(f"rule for {rule.field_path!r}: unknown reason {rule.reason!r}")
            if not rule.visible_to:
                raise PolicyError(f"rule for {rule.field_path!r}: visible_to must not be empty")
            if len(set(rule.visible_to)) != len(rule.visible_to):
                raise PolicyError(f"rule for {rule.field_path!r}: duplicate audiences")
            for a in rule.visible_to:
                if a not in _RANK:
                    raise PolicyError(f"rule for {rule.field_path!r}: unknown audience {a!r}")
            if rule.field_path in seen:
                raise PolicyError(f"more than one rule for {rule.field_path!r}")
            seen.add(rule.field_path)
        for path, lowest in self.default_visibility.items():
            _check_path(path)
            if lowest not in _RANK:
                raise PolicyError(f"default_visibility for {path!r}: unknown audience {lowest!r}")
        if self.default_reason not in REDACTION_REASONS:
            raise PolicyError(f"unknown default_reason {self.default_reason!r}")

    def effective_rules(self) -> tuple[RedactionRule, ...]:
        """Explicit rules, then default-visibility rules for uncovered paths.

        ``visible_to`` is normalized to its upward closure.
        """
        out = [RedactionRule(r.field_path, r.reason, upward_closure(r.visible_to)) for r in self.rules]
        covered = {r.field_path for r in self.rules}
        for path in sorted(self.default_visibility):
            if path not in covered:
                out.append(RedactionRule(path, self.default_reason,
                                         audiences_from(self.default_visibility[path])))
        return tuple(out)

    @classmethod
    def from_json(cls, data: Mapping) -> "RedactionPolicy":
        if not isinstance(data, Mapping):
            raise PolicyError("policy document must be a JSON object")
        rules = []
        for raw in data.get("rules", ()):
            path = raw.get("field_path", raw.get("field"))
            if path is None or "reason" not in raw:
                raise PolicyError(f"rule needs 'field' and 'reason': {raw!r}")
            rules.append(RedactionRule(path, raw["reason"], tuple(raw.get("visible_to", ()))))
        kwargs = {}
        if "default_reason" in data:
            kwargs["default_reason"] = data["default_reason"]
        return cls(rules=tuple(rules), default_visibility=dict(data.get("default_visibility", {})), **kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "RedactionPolicy":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))

    def to_json(self) -> dict:
        return {
            "rules": [r.to_json() for r in self.rules],
            "default_visibility": dict(sorted(self.default_visibility.items())),
            "default_reason": self.default_reason,
        }


def _check_path(path: str) -> None:
    if path not in FIELD_PATHS:
        raise PolicyError(f"unknown field path {path!r}")
    if not _redactable(path):
        raise PolicyError(f"field path {path!r} cannot be hidden without breaking the schema")


EMPTY_POLICY = RedactionPolicy()

DEFAULT_POLICY = RedactionPolicy(rules=(
    RedactionRule("provider_chain", "trade_secret", ("auditor",)),
    RedactionRule("safety.category", "safety", ("auditor",)),
    RedactionRule("fallback.from", "security", ("developer", "administrator", "auditor")),
    RedactionRule("fallback.to", "security", ("developer", "administrator", "auditor")),
))


# --------------------------------------------------------------------------
# views


@dataclass(frozen=True)
class AudienceView:
    audience: str
    receipt: RouteReceipt

    @property
    def redactions(self) -> tuple[RedactionEntry, ...]:
        return self.receipt.redactions


def _present(doc: Any, parts: Sequence[str]) -> bool:
    if not parts:
        return True
    if isinstance(doc, list):
        return any(_present(item, parts) for item in doc)
    if isinstance(doc, dict) and parts[0] in doc:
        return _present(doc[parts[0]], parts[1:])
    return False


def _hide(doc: Any, parts: Sequence[str], path: str) -> None:
    """Remove or generalize ``path`` inside ``doc`` (mutates)."""
    if isinstance(doc, list):
        for item in doc:
            _hide(item, parts, path)
        return
    if not isinstance(doc, dict):
        return
    head = parts[0]
    if head not in doc:
        return
    if len(parts) > 1:
        _hide(doc[head], parts[1:], path)
        return
    replacement = _generalized(path)
    if replacement is None:
        del doc[head]
    else:
        doc[head] = copy.deepcopy(replacement)
    if FIELD_PATHS[path]["parent_flag"]:
        doc["redacted"] = True


def _embedded_rules(receipt: RouteReceipt) -> list[RedactionRule]:
    # a receipt's own audience-scoped entries bind every view of it
    out = []
    for entry in receipt.redactions:
        if entry.visible_to and _redactable(entry.field):
            out.append(RedactionRule(entry.field, entry.reason, upward_closure(entry.visible_to)))
    return out


def view_for(receipt: RouteReceipt, audience: str, policy: RedactionPolicy = EMPTY_POLICY) -> AudienceView:
    """Project a receipt for one audience under a redaction policy."""
    audience_rank(audience)
    original = receipt.to_json()
    doc = copy.deepcopy(original)
    existing = list(receipt.redactions)
    new_entries: list[RedactionEntry] = []
    rules = list(policy.effective_rules()) + _embedded_rules(receipt)
    # parents before children so a generalized object is not re-entered
    rules.sort(key=lambda r: r.field_path.count("."))
    for rule in rules:
        parts = rule.field_path.split(".")
        entry = RedactionEntry(field=rule.field_path, reason=rule.reason, visible_to=rule.visible_to)
        if not (entry in existing or _present(original, parts)):
            continue
        if audience not in rule.visible_to:
            _hide(doc, parts, rule.field_path)
        if entry not in new_entries:
            new_entries.append(entry)
    added = [e for e in new_entries if e not in existing]
    doc["redactions"] = [_entry_json(e) for e in existing + added]
    return AudienceView(audience=audience, receipt=parse_receipt(doc))


def _entry_json(entry: RedactionEntry) -> dict:
    out = {"field": entry.field, "reason": entry.reason}
    if entry.visible_to is not None:
        out["visible_to"] = list(entry.visible_to)
    return out


# --------------------------------------------------------------------------
# end-user labels

LABEL_CODES = (
    "web_search_used",
    "fast_mode",
    "model_updated",
    "fallback_used",
    "safety_restricted",
    "incomplete_response",
)

LABEL_TEXT = {
    "web_search_used": "web search used",
    "fast_mode": "answered in fast mode",
    "model_updated": "model updated since previous answer",
    "fallback_used": "fallback used",
    "safety_restricted": "response restricted by safety policy",
    "incomplete_response": "response incomplete",
}

FAST_EFFORT = frozenset({"minimal", "low"})


@dataclass(frozen=True)
class EndUserLabel:
    code: str
    present: bool

    @property
    def text(self) -> str:
        return LABEL_TEXT[self.code]

    def to_json(self) -> dict:
        return {"code": self.code, "present": self.present}


def end_user_labels(
    receipt: RouteReceipt,
    previous_resolved_model: str | None = None,
    fast_tiers: Iterable[str] = (),
) -> list[EndUserLabel]:
    """The six compact labels, always in the same order.

    ``previous_resolved_model`` is the model that served the prior answer
    for the same requested model; without it ``model_updated`` is false.
    ``fast_tiers`` names the deployment's latency-optimized service tiers.
    """
    web = receipt.tools is not None and any(
        t.name == "web_search" and t.invocation_count > 0 for t in receipt.tools.used)
    fast = (receipt.effort is not None and receipt.effort.requested in FAST_EFFORT) or (
        receipt.service_tier is not None and receipt.service_tier.effective in set(fast_tiers))
    updated = (previous_resolved_model is not None and receipt.resolved_model is not None
               and previous_resolved_model != receipt.resolved_model)
    present = {
        "web_search_used": web,
        "fast_mode": fast,
        "model_updated": updated,
        "fallback_used": receipt.fallback.status == "occurred",
        "safety_restricted": receipt.safety.status == "intervened",
        "incomplete_response": receipt.completion_status != "complete",
    }
    return [EndUserLabel(code, bool(present[code])) for code in LABEL_CODES]
