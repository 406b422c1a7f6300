"""Completion handling and route probes on top of the simulator and the store."""
from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Callable, Mapping, Protocol, Sequence

from routereceipt.gateway.simulator import (
    PLACEHOLDER_TEXT,
    CompletionRequest,
    Decision,
    Failure,
    ScenarioError,
    SimScenario,
    Simulator,
    merge_failures,
    raw_metadata,
)
from routereceipt.normalize import Envelope, extract_fragment, merge
from routereceipt.receipt import RouteReceipt, format_timestamp, new_receipt_id
from routereceipt.store import ReceiptStore

logger = logging.getLogger(__name__)

Clock = Callable[[], datetime]


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


class ProbeError(ValueError):
    pass


class Upstream(Protocol):
    """Source of route decisions and raw provider metadata for one request."""

    surface: str

    def complete(self, request: CompletionRequest, index: int) -> tuple[Decision, dict]:
        ...


class SimulatedUpstream:
    surface = "simulated"

    def __init__(self, scenario: SimScenario):
        self.scenario = scenario
        self.simulator = Simulator(scenario)

    def complete(self, request: CompletionRequest, index: int) -> tuple[Decision, dict]:
        decision = self.simulator.decide(request, index)
        return decision, raw_metadata(request, decision)


class LiveUpstream:
    """Adapter slot for a real provider.  Not implemented in this release."""

    surface = "openai_priority"

    def complete(self, request: CompletionRequest, index: int) -> tuple[Decision, dict]:
        raise NotImplementedError("live upstreams are not supported; use the simulated provider")


@dataclass(frozen=True)
class CompletionExchange:
    request: CompletionRequest
    text: str
    raw: dict
    receipt: RouteReceipt
    decision: Decision

    def response_json(self) -> dict:
        return {"receipt_id": self.receipt.receipt_id, "text": self.text, "raw": self.raw}


class Gateway:
    """Issues completions, builds a receipt for each one and stores it.

    Request indices come from an atomic counter unless the caller pins one;
    the clock and id factory are injectable so tests can freeze them.
    """

    def __init__(self, scenario: SimScenario | None = None, store: ReceiptStore | None = None, *,
                 upstream: Upstream | None = None, clock: Clock = utc_now,
                 id_factory: Callable[[], str] = new_receipt_id):
        self.scenario = scenario or SimScenario()
        self.upstream = upstream or SimulatedUpstream(self.scenario)
        self.store = store if store is not None else ReceiptStore()
        self.clock = clock
        self.id_factory = id_factory
        self._counter = itertools.count()
        self._counter_lock = threading.Lock()
        self.decision_log: dict[str, Decision] = {}

    def next_index(self) -> int:
        with self._counter_lock:
            return next(self._counter)

    def handle_completion(self, request: CompletionRequest | Mapping, index: int | None = None) -> CompletionExchange:
        if not isinstance(request, CompletionRequest):
            request = CompletionRequest.from_json(request)
        if index is None:
            index = self.next_index()
        decision, raw = self.upstream.complete(request, index)
        served_at = format_timestamp(self.clock())
        envelope = Envelope(
            receipt_id=self.id_factory(),
            request_id=f"req-{index:06d}",
            served_at=served_at,
            model_identifier_type=decision.model_identifier_type,
            region_class=decision.region_class,
            completion_status=decision.completion_status,
            retention_class=self.scenario.retention_class,
        )
        fragment = extract_fragment(self.upstream.surface, raw, observed_at=served_at)
        result = merge(envelope, [fragment], tools_allowed=request.tools_allowed)
        self.store.append(result.receipt)
        self.decision_log[result.receipt.receipt_id] = decision
        if decision.completion_status == "error":
            logger.info("request %d failed on every hop; error receipt %s stored", index,
                        result.receipt.receipt_id)
        text = PLACEHOLDER_TEXT if decision.completion_status == "complete" else ""
        return CompletionExchange(request=request, text=text, raw=raw, receipt=result.receipt,
                                  decision=decision)


def receipt_route(receipt: RouteReceipt) -> dict:
    """The route facts a receipt reports, in the decision log's shape."""
    tier = receipt.service_tier
    fb = receipt.fallback
    fallback = {"status": fb.status, "reason": fb.reason}
    if fb.from_ is not None:
        fallback["from"] = fb.from_
    if fb.to is not None:
        fallback["to"] = fb.to
    tools = []
    if receipt.tools is not None:
        for t in receipt.tools.used:
            use = {"name": t.name, "invocation_count": t.invocation_count}
            if t.result_refs is not None:
                use["result_refs"] = list(t.result_refs)
            tools.append(use)
    return {
        "resolved_model": receipt.resolved_model,
        "tier": None if tier is None else {k: v for k, v in (
            ("requested", tier.requested), ("effective", tier.effective),
            ("change_reason", tier.change_reason)) if v is not None},
        "fallback": fallback,
        "tools_used": tools,
        "safety": {"status": receipt.safety.status, "visible_action": receipt.safety.visible_action},
        "completion_status": receipt.completion_status,
    }


def decision_route(decision: Decision) -> dict:
    return {
        "resolved_model": decision.resolved_model,
        "tier": decision.tier,
        "fallback": decision.fallback,
        "tools_used": list(decision.tools_used),
        "safety": decision.safety,
        "completion_status": decision.completion_status,
    }


# --------------------------------------------------------------------------
# probes


@dataclass(frozen=True)
class ProbeEvent:
    request_index: int
    detail: dict

    def to_json(self) -> dict:
        return {"request_index": self.request_index, "detail": self.detail}


@dataclass(frozen=True)
class ProbeReport:
    probe: str
    events: tuple[ProbeEvent, ...] = ()
    summary: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"probe": self.probe, "events": [e.to_json() for e in self.events], "summary": self.summary}


def _fixed_clock(start: datetime) -> Clock:
    ticks = itertools.count()

    def clock() -> datetime:
        return start + timedelta(seconds=next(ticks))
    return clock


_PROBE_EPOCH = datetime(2026, 1, 1, tzinfo=timezone.utc)


def _probe_gateway(scenario: SimScenario) -> Gateway:
    ids = itertools.count()
    return Gateway(scenario, ReceiptStore(), clock=_fixed_clock(_PROBE_EPOCH),
                   id_factory=lambda: f"rr-probe-{next(ids):08d}")


def run_alias_drift_probe(prompts: Sequence[str], n: int, scenario: SimScenario,
                          aliases: Sequence[str] | None = None) -> ProbeReport:
    """Send every prompt for every alias at request indices 0..n-1 and watch resolved_model.

    An event is one request index where some alias resolved differently from
    its previous observation.  Receipts where fallback occurred or no model
    was served say nothing about alias resolution and are skipped.
    """
    if n < 0:
        raise ProbeError("n must be non-negative")
    if not prompts:
        raise ProbeError("at least one prompt is required")
    aliases = list(aliases) if aliases is not None else sorted(scenario.alias_table)
    unknown = [a for a in aliases if a not in scenario.alias_table]
    if unknown:
        raise ProbeError(f"aliases not in scenario alias_table: {unknown}")
    if not aliases:
        raise ProbeError("scenario defines no aliases to probe")

    gateway = _probe_gateway(scenario)
    previous: dict[str, str] = {}
    events = []
    observed = skipped = 0
    for index in range(n):
        changes = []
        for alias in aliases:
            seen = []
            for prompt in prompts:
                receipt = gateway.handle_completion(
                    CompletionRequest(requested_model=alias, prompt=prompt), index=index).receipt
                if receipt.fallback.status != "none" or receipt.resolved_model is None:
                    skipped += 1
                    continue
                observed += 1
                seen.append(receipt.resolved_model)
            for model in dict.fromkeys(seen):
                before = previous.get(alias)
                if before is not None and model != before:
                    changes.append({"alias": alias, "from": before, "to": model})
                previous[alias] = model
        if changes:
            events.append(ProbeEvent(index, {"changes": changes}))
    summary = {"aliases": aliases, "prompts": len(prompts), "requests_per_prompt": n,
               "receipts_observed": observed, "receipts_skipped": skipped, "drift_events": len(events)}
    return ProbeReport("alias_drift", tuple(events), summary)


def run_fallback_probe(triggers: Sequence[Mapping | Failure], scenario: SimScenario,
                       n: int | None = None) -> ProbeReport:
    """Force failures at chosen indices and check each receipt exposes the fallback.

    A trigger is visible when the receipt reports status "occurred" with
    from, to and reason all present and equal to what the simulator did.
    """
    try:
        failures = [t if isinstance(t, Failure) else Failure.from_json(t) for t in triggers]
    except (ScenarioError, KeyError, TypeError, ValueError) as exc:
        raise ProbeError(f"bad trigger: {exc}") from None
    chain = scenario.fallback_chain.models
    if failures and len(chain) < 2:
        raise ProbeError("fallback probe needs a scenario fallback_chain with at least two models")
    limit = n if n is not None else (max((f.request_index for f in failures), default=-1) + 1)
    for f in failures:
        if not 0 <= f.request_index < limit:
            raise ProbeError(f"trigger index {f.request_index} outside 0..{limit - 1}")

    try:
        forced = merge_failures(scenario, failures)
    except ScenarioError as exc:
        raise ProbeError(str(exc)) from None
    gateway = _probe_gateway(forced)
    by_index = {f.request_index: f for f in failures}
    events = []
    for index in range(limit):
        exchange = gateway.handle_completion(CompletionRequest(requested_model=chain[0] if chain else "sim-model"),
                                             index=index)
        trigger = by_index.get(index)
        if trigger is None:
            continue
        fb = exchange.receipt.fallback
        logged = exchange.decision.fallback
        exposed = {"status": fb.status, "from": fb.from_, "to": fb.to, "reason": fb.reason}
        visible = (fb.status == "occurred" and None not in (fb.from_, fb.to, fb.reason)
                   and exposed == {k: logged.get(k) for k in exposed})
        events.append(ProbeEvent(index, {
            "kind": trigger.kind,
            "visible": visible,
            "fallback": {k: v for k, v in exposed.items() if v is not None},
            "completion_status": exchange.receipt.completion_status,
            "receipt_id": exchange.receipt.receipt_id,
        }))
    visible_count = sum(e.detail["visible"] for e in events)
    summary = {"triggers": len(events), "visible": visible_count, "all_visible": visible_count == len(events)}
    return ProbeReport("fallback_observability", tuple(events), summary)
