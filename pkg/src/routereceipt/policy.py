"""Route constraints checked against receipts, and receipt-to-receipt diffs."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

from routereceipt.receipt import REGION_CLASSES, ReceiptError, RouteReceipt

VIOLATION_CODES = (
    "model_drift",
    "moving_alias_used",
    "fallback_forbidden",
    "region_forbidden",
    "tool_forbidden",
    "tier_mismatch",
)


class ConstraintPolicyError(ReceiptError):
    pass


@dataclass(frozen=True)
class ConstraintPolicy:
    """Route promises a workflow wants kept.

    The defaults constrain nothing.  ``forbid_global_endpoint`` is shorthand
    for dropping ``global`` from ``allowed_region_classes``.
    """

    pinned_resolved_model: str | None = None
    allow_moving_alias: bool = True
    allow_fallback: bool = True
    allowed_region_classes: frozenset[str] = frozenset(REGION_CLASSES)
    allowed_tools: frozenset[str] | None = None
    required_effective_tier: str | None = None
    forbid_global_endpoint: bool = False

    def __post_init__(self):
        object.__setattr__(self, "allowed_region_classes", frozenset(self.allowed_region_classes))
        if self.allowed_tools is not None:
            object.__setattr__(self, "allowed_tools", frozenset(self.allowed_tools))
        unknown = self.allowed_region_classes - set(REGION_CLASSES)
        if unknown:
            raise ConstraintPolicyError(f"unknown region classes {sorted(unknown)}")
        if not self.region_set():
            raise ConstraintPolicyError("allowed_region_classes must leave at least one region class")

    def region_set(self) -> frozenset[str]:
        if self.forbid_global_endpoint:
            return self.allowed_region_classes - {"global"}
        return self.allowed_region_classes

    @classmethod
    def from_json(cls, data: Mapping) -> "ConstraintPolicy":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ConstraintPolicyError(f"unknown policy keys {sorted(extra)}")
        kwargs = dict(data)
        if "allowed_region_classes" in kwargs:
            kwargs["allowed_region_classes"] = frozenset(kwargs["allowed_region_classes"])
        if kwargs.get("allowed_tools") is not None:
            kwargs["allowed_tools"] = frozenset(kwargs["allowed_tools"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "ConstraintPolicy":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))

    def to_json(self) -> dict:
        return {
            "pinned_resolved_model": self.pinned_resolved_model,
            "allow_moving_alias": self.allow_moving_alias,
            "allow_fallback": self.allow_fallback,
            "allowed_region_classes": [r for r in REGION_CLASSES if r in self.allowed_region_classes],
            "allowed_tools": None if self.allowed_tools is None else sorted(self.allowed_tools),
            "required_effective_tier": self.required_effective_tier,
            "forbid_global_endpoint": self.forbid_global_endpoint,
        }

    def split(self) -> list["ConstraintPolicy"]:
        """One single-constraint policy per active constraint."""
        base = ConstraintPolicy()
        parts = []
        if self.pinned_resolved_model is not None:
            parts.append(ConstraintPolicy(pinned_resolved_model=self.pinned_resolved_model))
        if not self.allow_moving_alias:
            parts.append(ConstraintPolicy(allow_moving_alias=False))
        if not self.allow_fallback:
            parts.append(ConstraintPolicy(allow_fallback=False))
        if self.region_set() != base.region_set():
            parts.append(ConstraintPolicy(allowed_region_classes=self.region_set()))
        if self.allowed_tools is not None:
            parts.append(ConstraintPolicy(allowed_tools=self.allowed_tools))
        if self.required_effective_tier is not None:
            parts.append(ConstraintPolicy(required_effective_tier=self.required_effective_tier))
        return parts


@dataclass(frozen=True)
class Violation:
    code: str
    field_path: str
    expected: str
    observed: str

    def to_json(self) -> dict:
        return {"code": self.code, "field_path": self.field_path,
                "expected": self.expected, "observed": self.observed}


def _hidden(receipt: RouteReceipt, dotted: str) -> bool:
    head = dotted.split(".")[0]
    return any(e.field in (dotted, head) for e in receipt.redactions)


def _absent(receipt: RouteReceipt, dotted: str) -> str:
    return "redacted" if _hidden(receipt, dotted) else "unknown"


def evaluate(receipt: RouteReceipt, policy: ConstraintPolicy) -> list[Violation]:
    """Every breached constraint, in a fixed order.

    A constraint that the receipt cannot demonstrate (value absent, unknown
    or redacted) counts as breached.
    """
    out: list[Violation] = []

    if policy.pinned_resolved_model is not None:
        observed = receipt.resolved_model
        if observed is None:
            observed = _absent(receipt, "resolved_model")
        if observed != policy.pinned_resolved_model:
            out.append(Violation("model_drift", "/resolved_model", policy.pinned_resolved_model, observed))

    if not policy.allow_moving_alias:
        kind = receipt.model_identifier_type
        if kind != "fixed":
            out.append(Violation("moving_alias_used", "/model_identifier_type", "fixed", kind))

    if not policy.allow_fallback:
        status = receipt.fallback.status
        if status != "none":
            out.append(Violation("fallback_forbidden", "/fallback/status", "none", status))

    allowed = policy.region_set()
    if receipt.region_class not in allowed:
        expected = "|".join(r for r in REGION_CLASSES if r in allowed)
        out.append(Violation("region_forbidden", "/region_class", expected, receipt.region_class))

    if policy.allowed_tools is not None:
        expected = "|".join(sorted(policy.allowed_tools)) or "(none)"
        if receipt.tools is None:
            out.append(Violation("tool_forbidden", "/tools", expected, _absent(receipt, "tools")))
        else:
            for i, tool in enumerate(receipt.tools.used):
                if tool.invocation_count > 0 and tool.name not in policy.allowed_tools:
                    out.append(Violation("tool_forbidden", f"/tools/used/{i}/name", expected, tool.name))

    if policy.required_effective_tier is not None:
        tier = receipt.service_tier
        if tier is None:
            observed = _absent(receipt, "service_tier.effective")
        else:
            observed = tier.effective
        if observed != policy.required_effective_tier:
            out.append(Violation("tier_mismatch", "/service_tier/effective",
                                 policy.required_effective_tier, observed))
    return out


# --------------------------------------------------------------------------
# diff

MATERIAL_PATTERNS = (
    re.compile(r"^/resolved_model$"),
    re.compile(r"^/service_tier/effective$"),
    re.compile(r"^/fallback/status$"),
    re.compile(r"^/region_class$"),
    re.compile(r"^/tools/used/\d+/name$"),
    re.compile(r"^/completion_status$"),
    re.compile(r"^/safety/status$"),
)

_MISSING = object()


@dataclass(frozen=True)
class FieldChange:
    field_path: str
    left_value: Any
    right_value: Any

    def to_json(self) -> dict:
        # null stands for "absent"; receipts never carry JSON null themselves
        return {"field_path": self.field_path, "left_value": self.left_value,
                "right_value": self.right_value}


@dataclass(frozen=True)
class RouteDiff:
    changed_fields: tuple[FieldChange, ...] = ()
    material: bool = False

    def to_json(self) -> dict:
        return {"changed_fields": [c.to_json() for c in self.changed_fields], "material": self.material}


def flatten(doc: Any, prefix: str = "") -> dict[str, Any]:
    """JSON-pointer → leaf value.  Empty containers count as leaves."""
    out: dict[str, Any] = {}
    if isinstance(doc, dict) and doc:
        for k, v in doc.items():
            out.update(flatten(v, f"{prefix}/{k}"))
    elif isinstance(doc, list) and doc:
        for i, v in enumerate(doc):
            out.update(flatten(v, f"{prefix}/{i}"))
    else:
        out[prefix] = doc
    return out


def _path_key(path: str) -> tuple:
    return tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in path.split("/")[1:])


def _is_material(path: str) -> bool:
    return any(p.match(path) for p in MATERIAL_PATTERNS)


def diff(a: RouteReceipt, b: RouteReceipt) -> RouteDiff:
    left, right = flatten(a.to_json()), flatten(b.to_json())
    changes = []
    for path in sorted(set(left) | set(right), key=_path_key):
        lv, rv = left.get(path, _MISSING), right.get(path, _MISSING)
        if lv != rv or type(lv) is not type(rv):
            changes.append(FieldChange(path, None if lv is _MISSING else lv,
                                       None if rv is _MISSING else rv))
    material = any(_is_material(c.field_path) for c in changes)
    return RouteDiff(changed_fields=tuple(changes), material=material)


def violation_codes(violations: Iterable[Violation]) -> list[str]:
    return [v.code for v in violations]
