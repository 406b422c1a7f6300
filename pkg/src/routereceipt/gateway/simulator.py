"""Deterministic simulated provider.

Every route decision for request ``i`` depends only on the scenario and
``i``: each request draws from its own ``random.Random(f"{seed}:{i}")`` and
always consumes the same draws in the same order, whatever branch it takes.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from routereceipt.receipt import REGION_CLASSES, RETENTION_CLASSES, SAFETY_ACTIONS

FAILURE_KINDS = ("rate_limit", "provider_error", "unavailable_model")

# the receipt vocabulary has no "unavailable model" reason; provider_error is closest
_FAILURE_REASON = {
    "rate_limit": "rate_limit",
    "provider_error": "provider_error",
    "unavailable_model": "provider_error",
}

PLACEHOLDER_TEXT = "[simulated completion]"


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class AliasStep:
    snapshot: str
    active_from: int


@dataclass(frozen=True)
class Schedule:
    """Fires on listed request indices, or with a per-request probability."""

    indices: frozenset[int] = frozenset()
    probability: float = 0.0

    @classmethod
    def from_json(cls, d: Mapping | None) -> "Schedule":
        if d is None:
            return cls()
        p = float(d.get("probability", 0.0))
        if not 0.0 <= p <= 1.0:
            raise ScenarioError(f"probability {p} outside [0, 1]")
        return cls(indices=frozenset(int(i) for i in d.get("indices", ())), probability=p)

    def fires(self, index: int, draw: float) -> bool:
        return index in self.indices or draw < self.probability

    def to_json(self) -> dict:
        return {"indices": sorted(self.indices), "probability": self.probability}


@dataclass(frozen=True)
class Failure:
    request_index: int
    kind: str
    hops: tuple[int, ...] | None = None  # None: primary only, or every hop for unavailable_model

    @classmethod
    def from_json(cls, d: Mapping) -> "Failure":
        kind = d["kind"]
        if kind not in FAILURE_KINDS:
            raise ScenarioError(f"unknown failure kind {kind!r}; expected one of {FAILURE_KINDS}")
        hops = d.get("hops")
        return cls(request_index=int(d["request_index"]), kind=kind,
                   hops=None if hops is None else tuple(int(h) for h in hops))

    def failing_hops(self, chain_length: int) -> set[int]:
        if self.hops is not None:
            return set(self.hops)
        if self.kind == "unavailable_model":
            return set(range(chain_length))
        return {0}

    def to_json(self) -> dict:
        out: dict[str, Any] = {"request_index": self.request_index, "kind": self.kind}
        if self.hops is not None:
            out["hops"] = list(self.hops)
        return out


@dataclass(frozen=True)
class FallbackChain:
    models: tuple[str, ...] = ()
    failures: tuple[Failure, ...] = ()
    failure_probability: float = 0.0

    @classmethod
    def from_json(cls, d: Mapping | None) -> "FallbackChain":
        if d is None:
            return cls()
        p = float(d.get("failure_probability", 0.0))
        if not 0.0 <= p <= 1.0:
            raise ScenarioError(f"failure_probability {p} outside [0, 1]")
        return cls(models=tuple(d.get("models", ())),
                   failures=tuple(Failure.from_json(f) for f in d.get("failures", ())),
                   failure_probability=p)

    def to_json(self) -> dict:
        return {"models": list(self.models), "failures": [f.to_json() for f in self.failures],
                "failure_probability": self.failure_probability}


@dataclass(frozen=True)
class ToolBehavior:
    schedule: Schedule = Schedule()
    always: bool = False
    results: int = 0
    result_refs: tuple[str, ...] | None = None

    @classmethod
    def from_json(cls, d: Mapping) -> "ToolBehavior":
        refs = d.get("result_refs")
        return cls(schedule=Schedule.from_json(d), always=bool(d.get("always", False)),
                   results=int(d.get("results", 0)),
                   result_refs=None if refs is None else tuple(refs))

    def to_json(self) -> dict:
        out = {**self.schedule.to_json(), "always": self.always, "results": self.results}
        if self.result_refs is not None:
            out["result_refs"] = list(self.result_refs)
        return out


@dataclass(frozen=True)
class SimScenario:
    seed: int = 0
    alias_table: Mapping[str, tuple[AliasStep, ...]] = field(default_factory=dict)
    tier_downgrade: Schedule = Schedule()
    downgrade_to: str = "default"
    default_tier: str = "default"
    fallback_chain: FallbackChain = FallbackChain()
    tool_behavior: Mapping[str, ToolBehavior] = field(default_factory=dict)
    safety_schedule: Schedule = Schedule()
    safety_action: str = "refused"
    region_class: str | tuple[str, ...] = "provider_default"
    retention_class: str | None = None

    def __post_init__(self):
        for alias, steps in self.alias_table.items():
            if not steps or steps[0].active_from != 0:
                raise ScenarioError(f"alias {alias!r} needs a step active from request 0")
            starts = [s.active_from for s in steps]
            if starts != sorted(set(starts)):
                raise ScenarioError(f"alias {alias!r} steps must have strictly increasing active_from")
        regions = (self.region_class,) if isinstance(self.region_class, str) else self.region_class
        if not regions:
            raise ScenarioError("region_class list must not be empty")
        for region in regions:
            if region not in REGION_CLASSES:
                raise ScenarioError(f"unknown region_class {region!r}")
        if self.safety_action not in SAFETY_ACTIONS or self.safety_action == "none":
            raise ScenarioError(f"bad safety action {self.safety_action!r}")
        if self.retention_class is not None and self.retention_class not in RETENTION_CLASSES:
            raise ScenarioError(f"unknown retention_class {self.retention_class!r}")

    @classmethod
    def from_json(cls, d: Mapping) -> "SimScenario":
        known = {"seed", "alias_table", "tier_downgrade", "default_tier", "fallback_chain",
                 "tool_behavior", "safety_schedule", "region_class", "retention_class"}
        extra = set(d) - known
        if extra:
            raise ScenarioError(f"unknown scenario keys {sorted(extra)}")
        aliases = {
            alias: tuple(AliasStep(snapshot=s["snapshot"], active_from=int(s["active_from"])) for s in steps)
            for alias, steps in d.get("alias_table", {}).items()
        }
        downgrade = d.get("tier_downgrade") or {}
        safety = d.get("safety_schedule") or {}
        region = d.get("region_class", "provider_default")
        return cls(
            seed=int(d.get("seed", 0)),
            alias_table=aliases,
            tier_downgrade=Schedule.from_json(downgrade),
            downgrade_to=downgrade.get("to", "default"),
            default_tier=d.get("default_tier", "default"),
            fallback_chain=FallbackChain.from_json(d.get("fallback_chain")),
            tool_behavior={name: ToolBehavior.from_json(b) for name, b in d.get("tool_behavior", {}).items()},
            safety_schedule=Schedule.from_json(safety),
            safety_action=safety.get("action", "refused"),
            region_class=region if isinstance(region, str) else tuple(region),
            retention_class=d.get("retention_class"),
        )

    @classmethod
    def load(cls, path: str | Path) -> "SimScenario":
        return cls.from_json(json.loads(Path(path).read_text("utf-8")))

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "alias_table": {a: [{"snapshot": s.snapshot, "active_from": s.active_from} for s in steps]
                            for a, steps in self.alias_table.items()},
            "tier_downgrade": {**self.tier_downgrade.to_json(), "to": self.downgrade_to},
            "default_tier": self.default_tier,
            "fallback_chain": self.fallback_chain.to_json(),
            "tool_behavior": {n: b.to_json() for n, b in self.tool_behavior.items()},
            "safety_schedule": {**self.safety_schedule.to_json(), "action": self.safety_action},
            "region_class": self.region_class if isinstance(self.region_class, str) else list(self.region_class),
            "retention_class": self.retention_class,
        }

    def resolve(self, model: str, index: int) -> str:
        steps = self.alias_table.get(model)
        if not steps:
            return model
        current = steps[0].snapshot
        for step in steps:
            if step.active_from <= index:
                current = step.snapshot
        return current

    def region_at(self, index: int) -> str:
        if isinstance(self.region_class, str):
            return self.region_class
        return self.region_class[index % len(self.region_class)]


@dataclass(frozen=True)
class CompletionRequest:
    requested_model: str
    requested_tier: str | None = None
    requested_effort: str | None = None
    tools_allowed: tuple[str, ...] | None = None
    region_preference: str | None = None
    prompt: str = ""

    @classmethod
    def from_json(cls, d: Mapping) -> "CompletionRequest":
        if not isinstance(d.get("requested_model"), str) or not d["requested_model"]:
            raise ValueError("requested_model must be a non-empty string")
        tools = d.get("tools_allowed")
        return cls(requested_model=d["requested_model"], requested_tier=d.get("requested_tier"),
                   requested_effort=d.get("requested_effort"),
                   tools_allowed=None if tools is None else tuple(tools),
                   region_preference=d.get("region_preference"), prompt=d.get("prompt", ""))

    def to_json(self) -> dict:
        return {"requested_model": self.requested_model, "requested_tier": self.requested_tier,
                "requested_effort": self.requested_effort,
                "tools_allowed": None if self.tools_allowed is None else list(self.tools_allowed),
                "region_preference": self.region_preference, "prompt": self.prompt}


@dataclass(frozen=True)
class Decision:
    """What the simulator actually did for one request; the receipt must agree."""

    index: int
    requested_model: str
    resolved_model: str | None
    model_identifier_type: str
    tier: dict | None
    fallback: dict
    tools_used: tuple[dict, ...]
    safety: dict
    completion_status: str
    region_class: str
    attempts: tuple[dict, ...] = ()

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "requested_model": self.requested_model,
            "resolved_model": self.resolved_model,
            "model_identifier_type": self.model_identifier_type,
            "tier": self.tier,
            "fallback": self.fallback,
            "tools_used": list(self.tools_used),
            "safety": self.safety,
            "completion_status": self.completion_status,
            "region_class": self.region_class,
            "attempts": list(self.attempts),
        }


class Simulator:
    def __init__(self, scenario: SimScenario):
        self.scenario = scenario
        self._failures: dict[int, list[Failure]] = {}
        for f in scenario.fallback_chain.failures:
            self._failures.setdefault(f.request_index, []).append(f)

    def _chain_for(self, primary: str, requested: str) -> list[str]:
        models = list(self.scenario.fallback_chain.models)
        if models and models[0] in (primary, requested):
            return [primary] + models[1:]
        return [primary]

    def decide(self, request: CompletionRequest, index: int) -> Decision:
        sc = self.scenario
        rng = random.Random(f"{sc.seed}:{index}")
        # fixed draw order: tier, failure, failure kind, tools (by name), safety
        tier_draw = rng.random()
        fail_draw = rng.random()
        kind_draw = rng.choice(("rate_limit", "provider_error"))
        tool_draws = {name: rng.random() for name in sorted(sc.tool_behavior)}
        safety_draw = rng.random()

        requested = request.requested_model
        primary = sc.resolve(requested, index)
        identifier_type = "moving_alias" if requested in sc.alias_table else "fixed"

        if request.requested_tier is None:
            tier = {"effective": sc.default_tier}
        elif sc.tier_downgrade.fires(index, tier_draw) and request.requested_tier != sc.downgrade_to:
            tier = {"requested": request.requested_tier, "effective": sc.downgrade_to, "change_reason": "capacity"}
        else:
            tier = {"requested": request.requested_tier, "effective": request.requested_tier,
                    "change_reason": "none"}

        chain = self._chain_for(primary, requested)
        failing: dict[int, str] = {}
        for f in self._failures.get(index, ()):
            for hop in f.failing_hops(len(chain)):
                failing.setdefault(hop, f.kind)
        if 0 not in failing and fail_draw < sc.fallback_chain.failure_probability and len(chain) > 1:
            failing[0] = kind_draw
        attempts = []
        served_hop = None
        for hop, model in enumerate(chain):
            if hop in failing:
                attempts.append({"hop": hop, "model": model, "outcome": failing[hop]})
                continue
            attempts.append({"hop": hop, "model": model, "outcome": "served"})
            served_hop = hop
            break

        if served_hop == 0:
            fallback = {"status": "none", "reason": "none"}
        elif len(attempts) > 1:
            fallback = {"status": "occurred", "from": chain[0], "to": attempts[-1]["model"],
                        "reason": _FAILURE_REASON[failing[0]]}
        else:
            fallback = {"status": "none", "reason": "none"}
        resolved = None if served_hop is None else chain[served_hop]

        tools_used = []
        if served_hop is not None:
            for name in sorted(sc.tool_behavior):
                behavior = sc.tool_behavior[name]
                if request.tools_allowed is not None and name not in request.tools_allowed:
                    continue
                if not (behavior.always or behavior.schedule.fires(index, tool_draws[name])):
                    continue
                refs = behavior.result_refs
                if refs is None and behavior.results:
                    refs = tuple(f"{name}:{index}:{k}" for k in range(behavior.results))
                use = {"name": name, "invocation_count": 1}
                if refs is not None:
                    use["result_refs"] = list(refs)
                tools_used.append(use)

        if served_hop is None:
            completion = "error"
            safety = {"status": "none", "visible_action": "none"}
        elif sc.safety_schedule.fires(index, safety_draw):
            completion = "safety_block"
            safety = {"status": "intervened", "visible_action": sc.safety_action}
        else:
            completion = "complete"
            safety = {"status": "none", "visible_action": "none"}

        return Decision(
            index=index,
            requested_model=requested,
            resolved_model=resolved,
            model_identifier_type=identifier_type,
            tier=tier,
            fallback=fallback,
            tools_used=tuple(tools_used),
            safety=safety,
            completion_status=completion,
            region_class=request.region_preference or sc.region_at(index),
            attempts=tuple(attempts),
        )


def raw_metadata(request: CompletionRequest, decision: Decision) -> dict:
    """Provider-side metadata for a decision, in the simulated surface's shape."""
    route: dict[str, Any] = {"requested_model": decision.requested_model}
    if decision.resolved_model is not None:
        route["resolved_model"] = decision.resolved_model
    route["service_tier"] = dict(decision.tier)
    if request.requested_effort is not None:
        status = "completed" if decision.completion_status == "complete" else "unknown"
        route["effort"] = {"requested": request.requested_effort, "effective_status": status}
    route["tools"] = {"used": [dict(u) for u in decision.tools_used]}
    refs = sum(len(u.get("result_refs", ())) for u in decision.tools_used)
    route["context"] = {"input_truncated": "false", "retrieved_item_count": refs}
    route["fallback"] = dict(decision.fallback)
    route["safety"] = dict(decision.safety)
    chain = [{"role": "requested", "provider": "sim", "model": decision.requested_model}]
    for attempt in decision.attempts:
        if attempt["outcome"] == "served":
            chain.append({"role": "served", "provider": "sim", "model": attempt["model"]})
        elif attempt["hop"]:
            chain.append({"role": "fallback", "provider": "sim", "model": attempt["model"]})
    route["provider_chain"] = chain
    return {"route": route, "attempts": [dict(a) for a in decision.attempts]}


def merge_failures(scenario: SimScenario, extra: Sequence[Failure]) -> SimScenario:
    """Copy of ``scenario`` with additional scheduled failures."""
    chain = scenario.fallback_chain
    return replace(scenario, fallback_chain=replace(chain, failures=chain.failures + tuple(extra)))
