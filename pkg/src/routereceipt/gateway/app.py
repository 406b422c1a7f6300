"""HTTP front end.  Every body is canonical JSON.

Status codes: 201 for a stored receipt, 400 for a body that is not JSON,
404 unknown id, 409 duplicate id, 410 purged id, 422 for anything that
parses but fails validation.
"""
from __future__ import annotations

import json
import logging
from typing import Any

from fastapi import FastAPI, Request, Response

from routereceipt.gateway.config import GatewayConfig
from routereceipt.gateway.service import Gateway, ProbeError, run_alias_drift_probe, run_fallback_probe
from routereceipt.gateway.simulator import CompletionRequest, ScenarioError, SimScenario
from routereceipt.policy import ConstraintPolicy, ConstraintPolicyError, evaluate
from routereceipt.receipt import (
    AUDIENCES,
    InvalidReceiptError,
    ValidationIssue,
    ValidationReport,
    canonical_json,
    export_schema,
    parse_receipt,
    validate_document,
)
from routereceipt.redact import DEFAULT_POLICY, RedactionPolicy, audience_rank, view_for
from routereceipt.store import (
    METRICS,
    DuplicateReceiptError,
    ReceiptNotFoundError,
    ReceiptPurgedError,
    ReceiptStore,
)

logger = logging.getLogger(__name__)

ROLE_HEADER = "X-RR-Role"


def _reply(body: Any, status: int = 200) -> Response:
    return Response(content=canonical_json(body), status_code=status, media_type="application/json")


def _malformed(detail: str) -> Response:
    report = ValidationReport(errors=(ValidationIssue("", "bad_type", detail),))
    return _reply(report.to_json(), 400)


def _problem(status: int, detail: str) -> Response:
    return _reply({"error": detail}, status)


async def _json_body(request: Request) -> Any:
    raw = await request.body()
    try:
        return json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise _BadBody(f"request body is not JSON: {exc}") from None


class _BadBody(Exception):
    pass


def resolve_audience(requested: str | None, role: str | None) -> str:
    """The less privileged of what was asked for and what the role header grants.

    No role header grants only end_user.
    """
    granted = role or "end_user"
    asked = requested or granted
    for value in (granted, asked):
        if value not in AUDIENCES:
            raise ValueError(f"unknown audience {value!r}; expected one of {AUDIENCES}")
    return min(asked, granted, key=audience_rank)


def create_app(gateway: Gateway | None = None, redaction_policy: RedactionPolicy = DEFAULT_POLICY) -> FastAPI:
    gateway = gateway or Gateway()
    store = gateway.store
    app = FastAPI(title="routereceipt gateway", version="0.1.0")
    app.state.gateway = gateway
    app.state.policy = redaction_policy

    @app.exception_handler(_BadBody)
    async def bad_body(request: Request, exc: _BadBody):
        return _malformed(str(exc))

    @app.post("/v1/completions")
    async def completions(request: Request):
        body = await _json_body(request)
        if not isinstance(body, dict):
            return _malformed("completion request must be a JSON object")
        try:
            req = CompletionRequest.from_json(body)
        except (ValueError, TypeError) as exc:
            return _problem(422, str(exc))
        exchange = gateway.handle_completion(req)
        return _reply({"receipt_id": exchange.receipt.receipt_id, "text": exchange.text})

    @app.post("/v1/receipts")
    async def ingest(request: Request):
        raw = await request.body()
        report = validate_document(raw)
        if not report.valid:
            malformed = any(e.path == "" and e.kind == "bad_type" for e in report.errors)
            return _reply(report.to_json(), 400 if malformed else 422)
        receipt = parse_receipt(raw)
        try:
            position = store.append(receipt)
        except DuplicateReceiptError as exc:
            return _problem(409, str(exc))
        return _reply({"receipt_id": receipt.receipt_id, "position": position}, 201)

    @app.get("/v1/receipts/{receipt_id}")
    async def fetch(receipt_id: str, request: Request, audience: str | None = None):
        try:
            who = resolve_audience(audience, request.headers.get(ROLE_HEADER))
        except ValueError as exc:
            return _problem(422, str(exc))
        try:
            view = store.get(receipt_id, who, app.state.policy)
        except ReceiptNotFoundError as exc:
            return _problem(404, str(exc))
        except ReceiptPurgedError as exc:
            t = exc.tombstone
            return _reply({"receipt_id": t.receipt_id, "purged_at": t.purged_at}, 410)
        return _reply(view.receipt.to_json())

    @app.post("/v1/validate")
    async def validate(request: Request):
        report = validate_document(await request.body())
        if report.valid:
            return _reply(report.to_json())
        malformed = any(e.path == "" and e.kind == "bad_type" for e in report.errors)
        return _reply(report.to_json(), 400 if malformed else 422)

    @app.post("/v1/constraints/evaluate")
    async def constraints(request: Request):
        body = await _json_body(request)
        if not isinstance(body, dict) or "receipt" not in body or "policy" not in body:
            return _malformed("expected an object with 'receipt' and 'policy'")
        try:
            receipt = parse_receipt(body["receipt"])
        except InvalidReceiptError as exc:
            return _reply(exc.report.to_json(), 422)
        try:
            policy = ConstraintPolicy.from_json(body["policy"])
        except (ConstraintPolicyError, TypeError) as exc:
            return _problem(422, str(exc))
        return _reply({"violations": [v.to_json() for v in evaluate(receipt, policy)]})

    @app.get("/v1/aggregates/{metric}")
    async def aggregates(metric: str, request: Request, requested_model: str | None = None):
        if metric not in METRICS:
            return _problem(404, f"unknown metric {metric!r}; expected one of {list(METRICS)}")
        params = request.query_params
        try:
            report = store.aggregate(metric, params.get("from"), params.get("to"), requested_model)
        except ValueError as exc:
            return _problem(422, str(exc))
        return _reply(report.to_json())

    def _scenario(body: dict) -> SimScenario:
        return SimScenario.from_json(body["scenario"]) if "scenario" in body else gateway.scenario

    @app.post("/v1/probes/alias-drift")
    async def alias_drift(request: Request):
        body = await _json_body(request)
        if not isinstance(body, dict):
            return _malformed("expected a JSON object")
        try:
            report = run_alias_drift_probe(body.get("prompts", ["probe"]), int(body.get("n", 100)),
                                           _scenario(body), body.get("aliases"))
        except (ProbeError, ScenarioError, KeyError, TypeError, ValueError) as exc:
            return _problem(422, str(exc))
        return _reply(report.to_json())

    @app.post("/v1/probes/fallback")
    async def fallback(request: Request):
        body = await _json_body(request)
        if not isinstance(body, dict):
            return _malformed("expected a JSON object")
        try:
            n = body.get("n")
            report = run_fallback_probe(body.get("triggers", []), _scenario(body),
                                        None if n is None else int(n))
        except (ProbeError, ScenarioError, KeyError, TypeError, ValueError) as exc:
            return _problem(422, str(exc))
        return _reply(report.to_json())

    @app.get("/v1/schema")
    async def schema():
        return Response(content=export_schema(), media_type="application/schema+json")

    return app


def app_from_config(config: GatewayConfig) -> FastAPI:
    scenario = SimScenario.load(config.scenario_path) if config.scenario_path else SimScenario()
    store = ReceiptStore(config.store_path) if config.store_path else ReceiptStore()
    policy = RedactionPolicy.load(config.policy_path) if config.policy_path else DEFAULT_POLICY
    return create_app(Gateway(scenario, store), policy)


def serve(config: GatewayConfig) -> None:
    import uvicorn

    logger.info("serving on %s:%d", config.host, config.port)
    uvicorn.run(app_from_config(config), host=config.host, port=config.port)
